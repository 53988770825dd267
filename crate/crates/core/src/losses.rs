//! Training losses with analytic gradients: Chamfer, nearest-neighbour normal
//! L1, displacement and garment-code regularizers, body collision hinge, and
//! their weighted total.
//!
//! Nearest-neighbour matches are recomputed on every call; gradients flow
//! through distances only, never through the argmin (ties go to the lowest
//! index).

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::{MeshSdf, PointGrid};
use crate::linalg::{scale, sub, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub chamfer: f64,
    pub normal: f64,
    pub displacement: f64,
    pub garment: f64,
    pub collision: f64,
    /// Collision margin in meters.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { chamfer: 1e4, normal: 1.0, displacement: 2e3, garment: 1.0, collision: 2e-2, epsilon: 5e-3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.chamfer, self.normal, self.displacement, self.garment, self.collision, self.epsilon];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            bail!(Validation, "loss weights and margin must be finite and non-negative: {self:?}");
        }
        Ok(())
    }
}

/// Unweighted loss terms of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub chamfer: f64,
    pub normal: f64,
    pub displacement: f64,
    pub garment: f64,
    pub collision: f64,
}

impl LossTerms {
    /// Weighted sum; the normal term contributes nothing unless `normal_active`.
    pub fn total(&self, w: &LossWeights, normal_active: bool) -> f64 {
        let normal = if normal_active { w.normal * self.normal } else { 0.0 };
        w.chamfer * self.chamfer + normal + w.displacement * self.displacement + w.garment * self.garment + w.collision * self.collision
    }

    pub fn all_finite(&self) -> bool {
        [self.chamfer, self.normal, self.displacement, self.garment, self.collision].iter().all(|v| v.is_finite())
    }
}

/// Nearest matches in both directions between a prediction and a target.
#[derive(Debug, Clone)]
pub struct Matching {
    /// For each predicted point, `(target index, squared distance)`.
    pub pred_to_target: Vec<(usize, f64)>,
    /// For each target point, `(predicted index, squared distance)`.
    pub target_to_pred: Vec<(usize, f64)>,
}

impl Matching {
    pub fn new(pred: &[Vec3], target: &[Vec3]) -> Result<Self> {
        if pred.is_empty() || target.is_empty() {
            bail!(Argument, "chamfer needs non-empty clouds ({} predicted, {} target)", pred.len(), target.len());
        }
        let tg = PointGrid::new(target)?;
        let pg = PointGrid::new(pred)?;
        Ok(Matching {
            pred_to_target: pred.iter().map(|p| tg.nearest(*p)).collect(),
            target_to_pred: target.iter().map(|t| pg.nearest(*t)).collect(),
        })
    }

    pub fn chamfer(&self) -> f64 {
        let a: f64 = self.pred_to_target.iter().map(|m| m.1).sum::<f64>() / self.pred_to_target.len() as f64;
        let b: f64 = self.target_to_pred.iter().map(|m| m.1).sum::<f64>() / self.target_to_pred.len() as f64;
        a + b
    }

    /// Gradient of the Chamfer distance with respect to the predicted points.
    pub fn chamfer_grad(&self, pred: &[Vec3], target: &[Vec3]) -> Vec<Vec3> {
        let n = pred.len() as f64;
        let m = target.len() as f64;
        let mut g = vec![[0.0; 3]; pred.len()];
        for (i, &(j, _)) in self.pred_to_target.iter().enumerate() {
            let d = sub(pred[i], target[j]);
            for c in 0..3 {
                g[i][c] += 2.0 * d[c] / n;
            }
        }
        for (j, &(i, _)) in self.target_to_pred.iter().enumerate() {
            let d = sub(pred[i], target[j]);
            for c in 0..3 {
                g[i][c] += 2.0 * d[c] / m;
            }
        }
        g
    }

    pub fn normal_loss(&self, pred_normals: &[Vec3], target_normals: &[Vec3]) -> f64 {
        let s: f64 = self
            .pred_to_target
            .iter()
            .zip(pred_normals)
            .map(|(&(j, _), n)| l1(*n, target_normals[j]))
            .sum();
        s / pred_normals.len() as f64
    }

    /// Subgradient of the normal loss with respect to predicted normals (`sign(0) = 0`).
    pub fn normal_grad(&self, pred_normals: &[Vec3], target_normals: &[Vec3]) -> Vec<Vec3> {
        let inv = 1.0 / pred_normals.len() as f64;
        self.pred_to_target
            .iter()
            .zip(pred_normals)
            .map(|(&(j, _), n)| {
                let t = target_normals[j];
                [sign(n[0] - t[0]) * inv, sign(n[1] - t[1]) * inv, sign(n[2] - t[2]) * inv]
            })
            .collect()
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn l1(a: Vec3, b: Vec3) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// Symmetric mean squared nearest-neighbour distance.
pub fn chamfer(x: &[Vec3], target: &[Vec3]) -> Result<f64> {
    Ok(Matching::new(x, target)?.chamfer())
}

pub fn chamfer_with_grad(x: &[Vec3], target: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    let m = Matching::new(x, target)?;
    Ok((m.chamfer(), m.chamfer_grad(x, target)))
}

/// Mean L1 distance between each predicted normal and the normal of its
/// position-nearest target point.
pub fn normal_loss(x: &[Vec3], normals: &[Vec3], target: &[Vec3], target_normals: &[Vec3]) -> Result<f64> {
    check_normals(x, normals, target, target_normals)?;
    let grid = PointGrid::new(target)?;
    let s: f64 = x.iter().zip(normals).map(|(p, n)| l1(*n, target_normals[grid.nearest(*p).0])).sum();
    Ok(s / x.len() as f64)
}

fn check_normals(x: &[Vec3], normals: &[Vec3], target: &[Vec3], target_normals: &[Vec3]) -> Result<()> {
    if normals.len() != x.len() || target_normals.len() != target.len() {
        bail!(
            Argument,
            "normal loss needs a normal per point ({} points / {} normals predicted, {} / {} target)",
            x.len(),
            normals.len(),
            target.len(),
            target_normals.len()
        );
    }
    if x.is_empty() {
        bail!(Argument, "normal loss needs a non-empty prediction");
    }
    Ok(())
}

/// `(1/N_d) Σ ‖r_i‖²`; zero for an empty list.
pub fn displacement_reg(r: &[Vec3]) -> f64 {
    if r.is_empty() {
        return 0.0;
    }
    r.iter().map(|v| crate::linalg::norm2(*v)).sum::<f64>() / r.len() as f64
}

pub fn displacement_reg_grad(r: &[Vec3]) -> Vec<Vec3> {
    let k = 2.0 / r.len().max(1) as f64;
    r.iter().map(|v| scale(*v, k)).collect()
}

/// `(1/N_d) Σ ‖z_i‖² + ‖h‖²` over row-major codes `z` of width `h.len()`.
pub fn garment_reg(z: &[f64], h: &[f64]) -> f64 {
    let dim = h.len().max(1);
    let rows = z.len() / dim;
    let local = if rows == 0 { 0.0 } else { z.iter().map(|v| v * v).sum::<f64>() / rows as f64 };
    local + h.iter().map(|v| v * v).sum::<f64>()
}

/// Gradients of [`garment_reg`] with respect to `z` and `h`.
pub fn garment_reg_grad(z: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dim = h.len().max(1);
    let rows = (z.len() / dim).max(1);
    let k = 2.0 / rows as f64;
    (z.iter().map(|v| k * v).collect(), h.iter().map(|v| 2.0 * v).collect())
}

/// `(1/N_g) Σ max(ε − d(x_j), 0)` with `d` the signed distance to the body.
pub fn collision_loss(x: &[Vec3], body: &MeshSdf, epsilon: f64) -> Result<f64> {
    Ok(collision_with_grad(x, body, epsilon)?.0)
}

/// Collision hinge and its gradient with respect to the points. An offending
/// point is pushed along the outward distance gradient `sign · (x − c)/‖x − c‖`.
pub fn collision_with_grad(x: &[Vec3], body: &MeshSdf, epsilon: f64) -> Result<(f64, Vec<Vec3>)> {
    if !(epsilon >= 0.0) {
        bail!(Argument, "collision margin must be non-negative, got {epsilon}");
    }
    if x.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let inv = 1.0 / x.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![[0.0; 3]; x.len()];
    for (i, p) in x.iter().enumerate() {
        let q = body.query(*p);
        let h = epsilon - q.distance;
        if h > 0.0 {
            loss += h * inv;
            let d = sub(*p, q.closest);
            let len = crate::linalg::norm(d);
            if len > 0.0 {
                let s = if q.distance < 0.0 { -1.0 } else { 1.0 };
                // d loss / d x = −(1/N) ∇d
                grad[i] = scale(d, -s * inv / len);
            }
        }
    }
    Ok((loss, grad))
}

/// Fraction of points strictly inside the body.
pub fn penetration_fraction(x: &[Vec3], body: &MeshSdf) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().filter(|p| body.signed_distance(**p) < 0.0).count() as f64 / x.len() as f64
}
