//! Small fixed-size linear algebra on `[f64; 3]` vectors and row-major 3×3 matrices.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm2(a: Vec3) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    sqrt(dot(a, a))
}

#[inline]
pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    norm2(sub(a, b))
}

/// Unit vector along `a`; the zero vector maps to itself.
#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    let n = norm(a);
    if n > 0.0 {
        scale(a, 1.0 / n)
    } else {
        a
    }
}

#[inline]
pub fn is_finite(a: Vec3) -> bool {
    a.iter().all(|v| v.is_finite())
}

#[inline]
pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

/// `mᵀ v`
#[inline]
pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    [
        [m[0][0], m[1][0], m[2][0]],
        [m[0][1], m[1][1], m[2][1]],
        [m[0][2], m[1][2], m[2][2]],
    ]
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn inverse(m: &Mat3) -> Option<Mat3> {
    let d = det(m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    let inv_d = 1.0 / d;
    Some([
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_d,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_d,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_d,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_d,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_d,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_d,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_d,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_d,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_d,
        ],
    ])
}

fn mat_add_scaled(acc: &mut Mat3, m: &Mat3, s: f64) {
    for i in 0..3 {
        for j in 0..3 {
            acc[i][j] += s * m[i][j];
        }
    }
}

/// Rotation matrix from an axis-angle vector (Rodrigues).
pub fn axis_angle_to_matrix(aa: Vec3) -> Mat3 {
    let theta = norm(aa);
    if theta < 1e-12 {
        // first-order expansion keeps tiny angles exact to machine precision
        return [[1.0, -aa[2], aa[1]], [aa[2], 1.0, -aa[0]], [-aa[1], aa[0], 1.0]];
    }
    let k = scale(aa, 1.0 / theta);
    let (s, c) = (libm::sin(theta), libm::cos(theta));
    let t = 1.0 - c;
    [
        [c + k[0] * k[0] * t, k[0] * k[1] * t - k[2] * s, k[0] * k[2] * t + k[1] * s],
        [k[1] * k[0] * t + k[2] * s, c + k[1] * k[1] * t, k[1] * k[2] * t - k[0] * s],
        [k[2] * k[0] * t - k[1] * s, k[2] * k[1] * t + k[0] * s, c + k[2] * k[2] * t],
    ]
}

/// Axis-angle vector of a rotation matrix, angle in `[0, π]`.
pub fn matrix_to_axis_angle(m: &Mat3) -> Vec3 {
    let cos = ((m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = libm::acos(cos);
    let v = [m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]];
    if theta < 1e-6 {
        return scale(v, 0.5);
    }
    let s = libm::sin(theta);
    if s > 1e-6 {
        return scale(v, theta / (2.0 * s));
    }
    // near a half turn: axis from the largest diagonal entry of (M + I)/2 = a aᵀ
    let i = (0..3).max_by(|&a, &b| m[a][a].partial_cmp(&m[b][b]).unwrap()).unwrap();
    let mut a = [0.0; 3];
    a[i] = sqrt(((m[i][i] + 1.0) / 2.0).max(0.0));
    for j in 0..3 {
        if j != i {
            a[j] = (m[i][j] + m[j][i]) / (4.0 * a[i]);
        }
    }
    scale(normalize(a), theta)
}

/// Closest rotation to `m` (orthogonal polar factor), via Newton iteration
/// `Q ← (Q + Q⁻ᵀ)/2`. Requires `det(m) > 0`.
pub fn polar_rotation(m: &Mat3) -> Result<Mat3> {
    let d = det(m);
    if !(d > 0.0) || !d.is_finite() {
        bail!(Numeric, "blended rotation has non-positive determinant {d}");
    }
    let mut q = *m;
    for _ in 0..64 {
        let inv = match inverse(&q) {
            Some(inv) => inv,
            None => bail!(Numeric, "singular matrix during polar decomposition"),
        };
        let inv_t = transpose(&inv);
        let mut next = [[0.0; 3]; 3];
        mat_add_scaled(&mut next, &q, 0.5);
        mat_add_scaled(&mut next, &inv_t, 0.5);
        let mut delta = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                delta = delta.max((next[i][j] - q[i][j]).abs());
            }
        }
        q = next;
        if delta < 1e-15 {
            break;
        }
    }
    Ok(q)
}

/// A rigid motion `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform { rotation: IDENTITY3, translation: [0.0; 3] };

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let t = RigidTransform { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = mat_mul(&transpose(&self.rotation), &self.rotation);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rtr[i][j] - expect).abs() > 1e-6 {
                    bail!(Validation, "rotation is not orthonormal (RᵀR[{i}][{j}] = {})", rtr[i][j]);
                }
            }
        }
        let d = det(&self.rotation);
        if (d - 1.0).abs() > 1e-6 {
            bail!(Validation, "rotation determinant {d} is not +1");
        }
        if !is_finite(self.translation) {
            bail!(Validation, "translation is not finite");
        }
        Ok(())
    }

    #[inline]
    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, p), self.translation)
    }

    #[inline]
    pub fn apply_vector(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.rotation, v)
    }

    pub fn to_affine(&self) -> Affine {
        Affine { linear: self.rotation, translation: self.translation }
    }
}

/// A general affine map `x ↦ A x + t`, the upper 3×4 block of a homogeneous 4×4.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub linear: Mat3,
    pub translation: Vec3,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { linear: IDENTITY3, translation: [0.0; 3] };
    pub const ZERO: Affine = Affine { linear: [[0.0; 3]; 3], translation: [0.0; 3] };

    pub fn translation(t: Vec3) -> Self {
        Affine { linear: IDENTITY3, translation: t }
    }

    #[inline]
    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.linear, p), self.translation)
    }

    #[inline]
    pub fn apply_vector(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.linear, v)
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Affine) -> Affine {
        Affine {
            linear: mat_mul(&self.linear, &other.linear),
            translation: add(mat_vec(&self.linear, other.translation), self.translation),
        }
    }

    /// `self += w * other`, entrywise on the 3×4 block.
    pub fn add_scaled(&mut self, other: &Affine, w: f64) {
        mat_add_scaled(&mut self.linear, &other.linear, w);
        for i in 0..3 {
            self.translation[i] += w * other.translation[i];
        }
    }

    /// Rigid transform whose rotation is the polar factor of the linear block.
    pub fn to_rigid(&self) -> Result<RigidTransform> {
        Ok(RigidTransform { rotation: polar_rotation(&self.linear)?, translation: self.translation })
    }

    pub fn max_abs_diff(&self, other: &Affine) -> f64 {
        let mut m = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                m = m.max((self.linear[i][j] - other.linear[i][j]).abs());
            }
            m = m.max((self.translation[i] - other.translation[i]).abs());
        }
        m
    }
}
