//! Clothing-cut map: labels every body surface sample as unclothed,
//! deformed, or generated. Loose regions come from 2D masks over orthographic
//! normal-map renders; mask pixels are back-projected to 3D and each sample
//! takes the label of its nearest back-projected pixel.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::body::ArticulatedBody;
use crate::error::{bail, Result};
use crate::geometry::{BaryRecord, PointCloudN, PointGrid};
use crate::linalg::{normalize, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Unclothed = 0,
    Deformed = 1,
    Generated = 2,
}

impl Label {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Unclothed),
            1 => Ok(Label::Deformed),
            2 => Ok(Label::Generated),
            _ => bail!(Validation, "invalid cut-map label {v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutMap {
    pub labels: Vec<Label>,
    pub sample_refs: Vec<BaryRecord>,
    /// Samples no back-projected pixel claimed; they default to `Deformed`.
    pub occluded: usize,
}

impl CutMap {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.sample_refs.len() {
            bail!(Validation, "{} labels for {} samples", self.labels.len(), self.sample_refs.len());
        }
        self.sample_refs.iter().try_for_each(|b| b.validate())
    }

    /// Sample counts `[unclothed, deformed, generated]`.
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for l in &self.labels {
            c[*l as usize] += 1;
        }
        c
    }

    pub fn ids_with(&self, label: Label) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, l)| **l == label).map(|(i, _)| i).collect()
    }

    pub fn records_with(&self, label: Label) -> Vec<BaryRecord> {
        self.ids_with(label).into_iter().map(|i| self.sample_refs[i]).collect()
    }

    /// Relabels every `Generated` sample as `Deformed`.
    pub fn without_generation(&self) -> CutMap {
        let labels = self.labels.iter().map(|l| if *l == Label::Generated { Label::Deformed } else { *l }).collect();
        CutMap { labels, sample_refs: self.sample_refs.clone(), occluded: self.occluded }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Front,
    Back,
}

/// Orthographic camera looking along `−z` (front) or `+z` (back). Depth is
/// measured along the viewing direction from the plane through `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrthoCamera {
    pub view: View,
    pub width: usize,
    pub height: usize,
    /// World units per pixel.
    pub scale: f64,
    /// World point imaged at the image center.
    pub center: Vec3,
    pub near: f64,
    pub far: f64,
}

impl OrthoCamera {
    /// Camera framing a vertical extent of `extent` meters around `center`.
    pub fn framing(view: View, size: usize, center: Vec3, extent: f64) -> Self {
        OrthoCamera { view, width: size, height: size, scale: extent / size as f64, center, near: -10.0, far: 10.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !(self.scale > 0.0) || !(self.far > self.near) {
            bail!(Validation, "invalid camera: {self:?}");
        }
        Ok(())
    }

    fn sx(&self) -> f64 {
        match self.view {
            View::Front => 1.0,
            View::Back => -1.0,
        }
    }

    /// Continuous pixel coordinates `(u, v)` and depth of a world point.
    pub fn project(&self, p: Vec3) -> (f64, f64, f64) {
        let s = self.sx();
        let u = s * (p[0] - self.center[0]) / self.scale + self.width as f64 / 2.0;
        let v = (self.center[1] - p[1]) / self.scale + self.height as f64 / 2.0;
        let depth = s * (self.center[2] - p[2]);
        (u, v, depth)
    }

    /// World point at continuous pixel coordinates and depth.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        let s = self.sx();
        [
            self.center[0] + s * (u - self.width as f64 / 2.0) * self.scale,
            self.center[1] - (v - self.height as f64 / 2.0) * self.scale,
            self.center[2] - s * depth,
        ]
    }

    /// World normal expressed in camera coordinates (`+z` toward the viewer).
    pub fn to_camera(&self, n: Vec3) -> Vec3 {
        let s = self.sx();
        [s * n[0], n[1], s * n[2]]
    }
}

/// Sentinel of the index buffer for pixels no point covers.
pub const NO_POINT: u32 = u32::MAX;

/// Z-buffered splat render.
#[derive(Debug, Clone, PartialEq)]
pub struct Render {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB in `[0,1]`; background is white.
    pub rgb: Vec<[f64; 3]>,
    /// Depth per pixel, `+∞` for background.
    pub depth: Vec<f64>,
    pub index: Vec<u32>,
}

impl Render {
    pub fn foreground(&self) -> usize {
        self.index.iter().filter(|&&i| i != NO_POINT).count()
    }

    /// Distinct point ids that win at least one pixel, ascending.
    pub fn visible_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.index.iter().copied().filter(|&i| i != NO_POINT).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Renders disks of radius `splat_radius` pixels (pixel centers within the
/// radius are covered; radius 0 covers the pixel containing the point). The
/// nearest point wins each pixel, ties to the lowest index. Colors are
/// `(n + 1)/2` of camera-space normals.
pub fn render_normal_map(cloud: &PointCloudN, camera: &OrthoCamera, splat_radius: f64) -> Result<Render> {
    camera.validate()?;
    let normals = cloud.normals()?;
    let (w, h) = (camera.width, camera.height);
    let mut depth = vec![f64::INFINITY; w * h];
    let mut index = vec![NO_POINT; w * h];
    let r = splat_radius.max(0.0);
    let r2 = r * r;
    for (i, p) in cloud.points.iter().enumerate() {
        let (u, v, d) = camera.project(*p);
        if !(d >= camera.near && d <= camera.far) {
            continue;
        }
        let mut cover = |px: i64, py: i64| {
            if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                return;
            }
            let k = py as usize * w + px as usize;
            if d < depth[k] {
                depth[k] = d;
                index[k] = i as u32;
            }
        };
        if r == 0.0 {
            cover(libm::floor(u) as i64, libm::floor(v) as i64);
            continue;
        }
        let (x0, x1) = (libm::floor(u - r - 0.5) as i64, libm::ceil(u + r - 0.5) as i64);
        let (y0, y1) = (libm::floor(v - r - 0.5) as i64, libm::ceil(v + r - 0.5) as i64);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let du = px as f64 + 0.5 - u;
                let dv = py as f64 + 0.5 - v;
                if du * du + dv * dv <= r2 {
                    cover(px, py);
                }
            }
        }
    }
    let rgb = index
        .iter()
        .map(|&i| {
            if i == NO_POINT {
                [1.0; 3]
            } else {
                let n = camera.to_camera(normals[i as usize]);
                [(n[0] + 1.0) / 2.0, (n[1] + 1.0) / 2.0, (n[2] + 1.0) / 2.0]
            }
        })
        .collect();
    Ok(Render { width: w, height: h, rgb, depth, index })
}

fn check_mask(mask: &[bool], render: &Render) -> Result<()> {
    if mask.len() != render.width * render.height {
        bail!(
            Argument,
            "mask has {} pixels, render is {}×{}",
            mask.len(),
            render.width,
            render.height
        );
    }
    Ok(())
}

/// Ids of the points winning mask-true pixels, ascending and distinct.
pub fn backproject_mask(mask: &[bool], render: &Render) -> Result<Vec<u32>> {
    check_mask(mask, render)?;
    let mut ids: Vec<u32> = mask
        .iter()
        .zip(&render.index)
        .filter(|(m, i)| **m && **i != NO_POINT)
        .map(|(_, i)| *i)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

/// Pixel-center points of every covered pixel, lifted to 3D with the depth
/// buffer, each flagged with its mask value.
pub fn backproject_pixels(mask: &[bool], render: &Render, camera: &OrthoCamera) -> Result<(Vec<Vec3>, Vec<bool>)> {
    check_mask(mask, render)?;
    let mut points = Vec::new();
    let mut loose = Vec::new();
    for py in 0..render.height {
        for px in 0..render.width {
            let k = py * render.width + px;
            if render.index[k] == NO_POINT {
                continue;
            }
            points.push(camera.unproject(px as f64 + 0.5, py as f64 + 0.5, render.depth[k]));
            loose.push(mask[k]);
        }
    }
    Ok((points, loose))
}

/// Back-projected pixels that may claim body samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClaimSet {
    pub points: Vec<Vec3>,
    /// Whether each point belongs to the loose region.
    pub loose: Vec<bool>,
}

impl ClaimSet {
    pub fn extend(&mut self, points: Vec<Vec3>, loose: Vec<bool>) {
        self.points.extend(points);
        self.loose.extend(loose);
    }

    /// Every point is loose.
    pub fn all_loose(points: Vec<Vec3>) -> Self {
        let loose = vec![true; points.len()];
        ClaimSet { points, loose }
    }
}

/// Labels samples. `positions` are the samples in the frame the masks were
/// rendered in. Samples on `unclothed_parts` are unclothed; any other sample
/// whose nearest claim point (within `claim_radius`) is loose is generated;
/// the rest are deformed. Samples without a claim point in range are counted
/// as occluded.
pub fn build_cut_map(
    positions: &[Vec3],
    samples: &[BaryRecord],
    claims: &ClaimSet,
    unclothed_parts: &[String],
    body: &ArticulatedBody,
    claim_radius: f64,
) -> Result<CutMap> {
    if positions.len() != samples.len() {
        bail!(Validation, "{} positions for {} samples", positions.len(), samples.len());
    }
    if claims.points.len() != claims.loose.len() {
        bail!(Validation, "claim set has {} points but {} flags", claims.points.len(), claims.loose.len());
    }
    let mut unclothed = Vec::with_capacity(unclothed_parts.len());
    for name in unclothed_parts {
        unclothed.push(body.part_id(name)?);
    }
    let grid = if claims.points.is_empty() { None } else { Some(PointGrid::new(&claims.points)?) };
    let r2 = claim_radius * claim_radius;
    let mut labels = Vec::with_capacity(samples.len());
    let mut occluded = 0;
    for (p, b) in positions.iter().zip(samples) {
        b.validate()?;
        let part = body.part_labels.get(b.vertex_ids[0] as usize).copied().unwrap_or(u16::MAX);
        if unclothed.contains(&part) {
            labels.push(Label::Unclothed);
            continue;
        }
        let claimed = grid.as_ref().map(|g| g.nearest(*p)).filter(|&(_, d)| d <= r2);
        match claimed {
            Some((j, _)) if claims.loose[j] => labels.push(Label::Generated),
            Some(_) => labels.push(Label::Deformed),
            None => {
                occluded += 1;
                labels.push(Label::Deformed);
            }
        }
    }
    Ok(CutMap { labels, sample_refs: samples.to_vec(), occluded })
}

/// Points whose depth is within `tolerance` of the depth buffer at their own
/// pixel, i.e. not hidden behind another surface.
pub fn visible_points(points: &[Vec3], camera: &OrthoCamera, render: &Render, tolerance: f64) -> Vec<bool> {
    points
        .iter()
        .map(|p| {
            let (u, v, d) = camera.project(*p);
            let (px, py) = (libm::floor(u), libm::floor(v));
            if px < 0.0 || py < 0.0 || px >= camera.width as f64 || py >= camera.height as f64 {
                return false;
            }
            let k = py as usize * camera.width + px as usize;
            d <= render.depth[k] + tolerance
        })
        .collect()
}

/// Normal color of a unit normal under `camera`, as used by the renderer.
pub fn normal_color(camera: &OrthoCamera, n: Vec3) -> [f64; 3] {
    let c = camera.to_camera(normalize(n));
    [(c[0] + 1.0) / 2.0, (c[1] + 1.0) / 2.0, (c[2] + 1.0) / 2.0]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(size: usize) -> OrthoCamera {
        OrthoCamera::framing(View::Front, size, [0.0; 3], 1.0)
    }

    #[test]
    fn single_point_disk() {
        let c = PointCloudN::with_normals(std::vec![[0.0; 3]], std::vec![[0.0, 0.0, 1.0]]).unwrap();
        let r = render_normal_map(&c, &cam(32), 3.0).unwrap();
        assert_eq!(r.rgb[16 * 32 + 16], [0.5, 0.5, 1.0]);
        assert_eq!(r.rgb[0], [1.0; 3]);
        // the point sits on a pixel corner, so centers lie at half-integer offsets
        let offsets = [-2.5f64, -1.5, -0.5, 0.5, 1.5, 2.5];
        let expected = offsets.iter().flat_map(|a| offsets.iter().map(move |b| a * a + b * b)).filter(|d| *d <= 9.0).count();
        assert_eq!(expected, 32);
        assert_eq!(r.foreground(), expected);
    }

    #[test]
    fn nearer_point_wins() {
        let c = PointCloudN::with_normals(
            std::vec![[0.0, 0.0, -0.5], [0.0, 0.0, 0.5]],
            std::vec![[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]],
        )
        .unwrap();
        let r = render_normal_map(&c, &cam(16), 2.0).unwrap();
        assert!(r.index.iter().all(|&i| i == NO_POINT || i == 1));
        let b = render_normal_map(&c, &OrthoCamera { view: View::Back, ..cam(16) }, 2.0).unwrap();
        assert!(b.index.iter().all(|&i| i == NO_POINT || i == 0));
    }

    #[test]
    fn project_roundtrip() {
        for view in [View::Front, View::Back] {
            let c = OrthoCamera { view, ..OrthoCamera::framing(view, 100, [0.1, 0.9, -0.2], 2.0) };
            let p = [0.3, 1.2, 0.4];
            let (u, v, d) = c.project(p);
            let q = c.unproject(u, v, d);
            assert!(crate::linalg::dist2(p, q) < 1e-24);
        }
    }

    #[test]
    fn mask_dims_checked() {
        let c = PointCloudN::with_normals(std::vec![[0.0; 3]], std::vec![[0.0, 0.0, 1.0]]).unwrap();
        let r = render_normal_map(&c, &cam(8), 1.0).unwrap();
        assert!(backproject_mask(&[true; 10], &r).is_err());
        assert!(backproject_mask(&[false; 64], &r).unwrap().is_empty());
        assert_eq!(backproject_mask(&[true; 64], &r).unwrap(), r.visible_ids());
    }
}
