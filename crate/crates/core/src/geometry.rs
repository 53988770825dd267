//! Geometric kernels: point clouds, barycentric records, sampling, nearest
//! neighbours, farthest point sampling and signed distance to triangle meshes.
//!
//! All kernels work in double precision and are pure functions of their inputs.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::linalg::{add, cross, dist2, dot, is_finite, norm, normalize, scale, sqrt, sub, Vec3};
use crate::rng::Rng;

/// Points with optional unit normals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloudN {
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
}

impl PointCloudN {
    pub fn from_points(points: Vec<Vec3>) -> Result<Self> {
        let c = PointCloudN { points, normals: None };
        c.validate()?;
        Ok(c)
    }

    pub fn with_normals(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        let c = PointCloudN { points, normals: Some(normals) };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn normals(&self) -> Result<&[Vec3]> {
        self.normals.as_deref().ok_or_else(|| Error::Argument("point cloud has no normals".into()))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.points.iter().enumerate() {
            if !is_finite(*p) {
                bail!(Validation, "point {i} is not finite");
            }
        }
        if let Some(ns) = &self.normals {
            if ns.len() != self.points.len() {
                bail!(Validation, "{} normals for {} points", ns.len(), self.points.len());
            }
            for (i, n) in ns.iter().enumerate() {
                let len = norm(*n);
                if !((len - 1.0).abs() <= 1e-6) {
                    bail!(Validation, "normal {i} has length {len}");
                }
            }
        }
        Ok(())
    }

    /// Keeps the listed points (and their normals) in the given order.
    pub fn select(&self, ids: &[usize]) -> PointCloudN {
        PointCloudN {
            points: ids.iter().map(|&i| self.points[i]).collect(),
            normals: self.normals.as_ref().map(|ns| ids.iter().map(|&i| ns[i]).collect()),
        }
    }
}

/// Location of a surface sample inside a triangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaryRecord {
    pub face_index: u32,
    pub weights: [f64; 3],
    pub vertex_ids: [u32; 3],
}

impl BaryRecord {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            bail!(Validation, "barycentric weights {:?} are not a partition of unity", self.weights);
        }
        Ok(())
    }

    pub fn validate_against(&self, mesh: &TriMesh) -> Result<()> {
        self.validate()?;
        let f = *mesh
            .faces
            .get(self.face_index as usize)
            .ok_or(Error::Index { index: self.face_index as usize, len: mesh.faces.len() })?;
        if f != self.vertex_ids {
            bail!(Validation, "vertex ids {:?} do not match face {} {:?}", self.vertex_ids, self.face_index, f);
        }
        Ok(())
    }
}

/// Indexed triangle mesh with counter-clockwise (outward) winding.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        for f in &faces {
            for &v in f {
                if v as usize >= vertices.len() {
                    return Err(Error::Index { index: v as usize, len: vertices.len() });
                }
            }
        }
        Ok(TriMesh { vertices, faces })
    }

    #[inline]
    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a as usize], self.vertices[b as usize], self.vertices[c as usize]]
    }

    /// Unnormalized normal, length equal to twice the area.
    pub fn face_cross(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.triangle(f);
        cross(sub(b, a), sub(c, a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        0.5 * norm(self.face_cross(f))
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        normalize(self.face_cross(f))
    }

    #[inline]
    pub fn point_at(&self, b: &BaryRecord) -> Vec3 {
        interpolate_vec3(&self.vertices, b)
    }

    /// Every undirected edge is shared by exactly two faces.
    pub fn is_watertight(&self) -> bool {
        let mut edges: Vec<(u32, u32)> = Vec::with_capacity(self.faces.len() * 3);
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                edges.push(if a < b { (a, b) } else { (b, a) });
            }
        }
        edges.sort_unstable();
        let mut i = 0;
        while i < edges.len() {
            let mut j = i;
            while j < edges.len() && edges[j] == edges[i] {
                j += 1;
            }
            if j - i != 2 {
                return false;
            }
            i = j;
        }
        !edges.is_empty()
    }

    /// Connected component id per face (faces sharing a vertex are connected).
    pub fn face_components(&self) -> (Vec<u32>, usize) {
        let mut parent: Vec<usize> = (0..self.vertices.len()).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for f in &self.faces {
            let r0 = find(&mut parent, f[0] as usize);
            for &v in &f[1..] {
                let r = find(&mut parent, v as usize);
                if r != r0 {
                    let (lo, hi) = if r < r0 { (r, r0) } else { (r0, r) };
                    parent[hi] = lo;
                }
            }
        }
        let mut label = vec![u32::MAX; self.vertices.len()];
        let mut count = 0usize;
        let comps = self
            .faces
            .iter()
            .map(|f| {
                let r = find(&mut parent, f[0] as usize);
                if label[r] == u32::MAX {
                    label[r] = count as u32;
                    count += 1;
                }
                label[r]
            })
            .collect();
        (comps, count)
    }
}

#[inline]
pub fn interpolate_vec3(values: &[Vec3], b: &BaryRecord) -> Vec3 {
    let mut out = [0.0; 3];
    for j in 0..3 {
        let v = values[b.vertex_ids[j] as usize];
        for k in 0..3 {
            out[k] += b.weights[j] * v[k];
        }
    }
    out
}

/// `Σ_j b_j · feature(s_j)` over a row-major per-vertex feature table with `dim` columns.
pub fn barycentric_interpolate(features: &[f64], dim: usize, bary: &BaryRecord) -> Result<Vec<f64>> {
    bary.validate()?;
    if dim == 0 || features.len() % dim != 0 {
        bail!(Argument, "feature table of length {} is not a multiple of dim {dim}", features.len());
    }
    let rows = features.len() / dim;
    for &v in &bary.vertex_ids {
        if v as usize >= rows {
            return Err(Error::Index { index: v as usize, len: rows });
        }
    }
    let mut out = vec![0.0; dim];
    barycentric_accumulate(features, dim, bary, &mut out);
    Ok(out)
}

/// Unchecked hot-path variant of [`barycentric_interpolate`] writing into `out`.
#[inline]
pub fn barycentric_accumulate(features: &[f64], dim: usize, bary: &BaryRecord, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for j in 0..3 {
        let w = bary.weights[j];
        let row = &features[bary.vertex_ids[j] as usize * dim..][..dim];
        for (o, f) in out.iter_mut().zip(row) {
            *o += w * f;
        }
    }
}

/// Adjoint of [`barycentric_accumulate`]: scatters `grad` back onto the vertex rows.
#[inline]
pub fn barycentric_scatter(grad: &[f64], dim: usize, bary: &BaryRecord, table_grad: &mut [f64]) {
    for j in 0..3 {
        let w = bary.weights[j];
        let row = &mut table_grad[bary.vertex_ids[j] as usize * dim..][..dim];
        for (t, g) in row.iter_mut().zip(grad) {
            *t += w * g;
        }
    }
}

/// Start index used by seeded farthest point sampling: the first draw of
/// ChaCha8 seeded with `seed`, reduced to `0..len` by rejection sampling.
pub fn fps_start_index(len: usize, seed: u64) -> usize {
    Rng::new(seed).below(len)
}

/// Greedy farthest point sampling seeded through [`fps_start_index`].
pub fn farthest_point_sample(points: &[Vec3], n: usize, seed: u64) -> Result<Vec<usize>> {
    if points.is_empty() {
        bail!(Argument, "cannot sample from an empty cloud");
    }
    farthest_point_sample_from(points, n, fps_start_index(points.len(), seed))
}

/// Greedy farthest point sampling from an explicit start index. Each step picks
/// the point maximizing the distance to the chosen set; ties go to the lowest index.
pub fn farthest_point_sample_from(points: &[Vec3], n: usize, start: usize) -> Result<Vec<usize>> {
    if n == 0 || n > points.len() {
        bail!(Argument, "cannot pick {n} of {} points", points.len());
    }
    if start >= points.len() {
        return Err(Error::Index { index: start, len: points.len() });
    }
    let mut chosen = Vec::with_capacity(n);
    let mut min_d = vec![f64::INFINITY; points.len()];
    let mut current = start;
    for _ in 0..n {
        chosen.push(current);
        min_d[current] = -1.0;
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let md = &mut min_d[i];
            if *md < 0.0 {
                continue;
            }
            let d = dist2(*p, c);
            if d < *md {
                *md = d;
            }
            if *md > best_d {
                best_d = *md;
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    Ok(chosen)
}

/// Uniform grid over a reference point set for exact nearest-neighbour queries.
#[derive(Debug, Clone)]
pub struct PointGrid {
    points: Vec<Vec3>,
    grid: CellGrid,
}

impl PointGrid {
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.is_empty() {
            bail!(Argument, "nearest-neighbour reference set is empty");
        }
        let (lo, hi) = bounds(points.iter().copied());
        let grid = CellGrid::build(lo, hi, points.len().div_ceil(2), points.len(), |i, push| {
            push(points[i], points[i])
        });
        Ok(PointGrid { points: points.to_vec(), grid })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Exact nearest reference point `(index, squared distance)`; ties go to the lowest index.
    pub fn nearest(&self, q: Vec3) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        self.grid.ring_search(q, |item| {
            let d = dist2(self.points[item as usize], q);
            let i = item as usize;
            if d < best.1 || (d == best.1 && i < best.0) {
                best = (i, d);
            }
            best.1
        });
        best
    }
}

/// Per-query exact nearest neighbour under squared Euclidean distance.
pub fn nearest_neighbor(queries: &[Vec3], reference: &[Vec3]) -> Result<Vec<(usize, f64)>> {
    let grid = PointGrid::new(reference)?;
    Ok(queries.iter().map(|q| grid.nearest(*q)).collect())
}

/// Brute-force `k` nearest neighbours of each query, ordered by (distance, index).
/// Returns a row-major `queries.len() × k` index table.
pub fn knn_indices(points: &[Vec3], queries: &[Vec3], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        bail!(Argument, "cannot take {k} neighbours among {} points", points.len());
    }
    let mut out = Vec::with_capacity(queries.len() * k);
    let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for q in queries {
        heap.clear();
        for (i, p) in points.iter().enumerate() {
            let d = dist2(*p, *q);
            if heap.len() == k && d >= heap[k - 1].0 {
                continue;
            }
            let pos = heap.partition_point(|&(hd, hi)| hd < d || (hd == d && hi < i));
            heap.insert(pos, (d, i));
            if heap.len() > k {
                heap.pop();
            }
        }
        out.extend(heap.iter().map(|&(_, i)| i));
    }
    Ok(out)
}

pub fn bounds(points: impl Iterator<Item = Vec3>) -> (Vec3, Vec3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (lo, hi)
}

/// Uniform cell grid storing item ids in CSR layout. Items register in every
/// cell overlapped by their bounding box.
#[derive(Debug, Clone)]
struct CellGrid {
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
}

impl CellGrid {
    fn build(
        lo: Vec3,
        hi: Vec3,
        target_cells: usize,
        count: usize,
        aabb: impl Fn(usize, &mut dyn FnMut(Vec3, Vec3)),
    ) -> CellGrid {
        let ext = [(hi[0] - lo[0]).max(1e-9), (hi[1] - lo[1]).max(1e-9), (hi[2] - lo[2]).max(1e-9)];
        let vol = ext[0] * ext[1] * ext[2];
        let mut cell = libm::cbrt(vol / target_cells.max(1) as f64);
        let max_ext = ext[0].max(ext[1]).max(ext[2]);
        cell = cell.max(max_ext / 128.0).max(1e-9);
        let dims = [
            ((ext[0] / cell) as usize + 1).min(256),
            ((ext[1] / cell) as usize + 1).min(256),
            ((ext[2] / cell) as usize + 1).min(256),
        ];
        let mut grid = CellGrid { origin: lo, cell, dims, starts: Vec::new(), items: Vec::new() };
        let ncells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0u32; ncells + 1];
        for i in 0..count {
            aabb(i, &mut |a, b| {
                let (c0, c1) = (grid.clamp_cell(a), grid.clamp_cell(b));
                for x in c0[0]..=c1[0] {
                    for y in c0[1]..=c1[1] {
                        for z in c0[2]..=c1[2] {
                            counts[grid.flat([x, y, z]) + 1] += 1;
                        }
                    }
                }
            });
        }
        for c in 0..ncells {
            counts[c + 1] += counts[c];
        }
        let mut fill = counts.clone();
        let mut items = vec![0u32; counts[ncells] as usize];
        for i in 0..count {
            aabb(i, &mut |a, b| {
                let (c0, c1) = (grid.clamp_cell(a), grid.clamp_cell(b));
                for x in c0[0]..=c1[0] {
                    for y in c0[1]..=c1[1] {
                        for z in c0[2]..=c1[2] {
                            let f = grid.flat([x, y, z]);
                            items[fill[f] as usize] = i as u32;
                            fill[f] += 1;
                        }
                    }
                }
            });
        }
        grid.starts = counts;
        grid.items = items;
        grid
    }

    #[inline]
    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    #[inline]
    fn clamp_cell(&self, p: Vec3) -> [usize; 3] {
        let mut c = [0usize; 3];
        for k in 0..3 {
            let f = (p[k] - self.origin[k]) / self.cell;
            c[k] = if f <= 0.0 { 0 } else { (f as usize).min(self.dims[k] - 1) };
        }
        c
    }

    #[inline]
    fn cell_items(&self, f: usize) -> &[u32] {
        &self.items[self.starts[f] as usize..self.starts[f + 1] as usize]
    }

    /// Visits cells in Chebyshev shells around the query's cell. `visit`
    /// returns the current best squared distance; the search stops once no
    /// unvisited cell can hold anything closer.
    fn ring_search(&self, q: Vec3, mut visit: impl FnMut(u32) -> f64) {
        let c = self.clamp_cell(q);
        let max_r = self.dims.iter().copied().max().unwrap_or(1);
        let mut best = f64::INFINITY;
        for r in 0..=max_r {
            let lo = [c[0].saturating_sub(r), c[1].saturating_sub(r), c[2].saturating_sub(r)];
            let hi = [
                (c[0] + r).min(self.dims[0] - 1),
                (c[1] + r).min(self.dims[1] - 1),
                (c[2] + r).min(self.dims[2] - 1),
            ];
            for x in lo[0]..=hi[0] {
                let dx = x.abs_diff(c[0]);
                for y in lo[1]..=hi[1] {
                    let dy = y.abs_diff(c[1]);
                    for z in lo[2]..=hi[2] {
                        let dz = z.abs_diff(c[2]);
                        if dx.max(dy).max(dz) != r {
                            continue;
                        }
                        for &item in self.cell_items(self.flat([x, y, z])) {
                            best = visit(item);
                        }
                    }
                }
            }
            // lower bound on the distance to any cell outside the visited block
            let mut lb = f64::INFINITY;
            for k in 0..3 {
                if lo[k] > 0 {
                    let b = self.origin[k] + lo[k] as f64 * self.cell;
                    lb = lb.min((q[k] - b).max(0.0));
                }
                if hi[k] + 1 < self.dims[k] {
                    let b = self.origin[k] + (hi[k] + 1) as f64 * self.cell;
                    lb = lb.min((b - q[k]).max(0.0));
                }
            }
            if lb == f64::INFINITY || best < lb * lb {
                return;
            }
        }
    }
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision Detection 5.1.5).
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    let ab = sub(b, a);
    let ac = sub(c, a);
    let ap = sub(p, a);
    let d1 = dot(ab, ap);
    let d2 = dot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let d3 = dot(ab, bp);
    let d4 = dot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return add(a, scale(ab, v));
    }
    let cp = sub(p, c);
    let d5 = dot(ab, cp);
    let d6 = dot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return add(a, scale(ac, w));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return add(b, scale(sub(c, b), w));
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    add(a, add(scale(ab, v), scale(ac, w)))
}

/// Möller–Trumbore ray/triangle intersection; returns the ray parameter of the hit.
pub fn ray_triangle(origin: Vec3, dir: Vec3, a: Vec3, b: Vec3, c: Vec3) -> Option<f64> {
    let e1 = sub(b, a);
    let e2 = sub(c, a);
    let pvec = cross(dir, e2);
    let det = dot(e1, pvec);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = sub(origin, a);
    let u = dot(tvec, pvec) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = cross(tvec, e1);
    let v = dot(dir, qvec) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(dot(e2, qvec) * inv)
}

/// Result of a closest-surface query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceQuery {
    /// Signed distance, negative inside.
    pub distance: f64,
    pub closest: Vec3,
    pub face: usize,
}

/// Signed distance to a closed triangle mesh.
///
/// Magnitude is the exact distance to the nearest non-degenerate triangle.
/// Inside/outside is decided by ray parity: three fixed pseudo-random rays are
/// cast, crossings are counted per connected component, a ray votes "inside"
/// when some component is crossed an odd number of times, and the majority
/// of the three votes wins. Counting per component keeps overlapping closed
/// parts (e.g. touching limbs) classified correctly.
#[derive(Debug, Clone)]
pub struct MeshSdf {
    tris: Vec<[Vec3; 3]>,
    face_ids: Vec<usize>,
    component: Vec<u32>,
    n_components: usize,
    grid: CellGrid,
    rays: [Vec3; 3],
    /// Number of zero-area faces ignored when building the structure.
    pub skipped_degenerate: usize,
}

/// Seed of the PRNG that draws the three parity rays.
pub const SDF_RAY_SEED: u64 = 0x5d_f0_0d;

impl MeshSdf {
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        let (comp_all, n_components) = mesh.face_components();
        let mut tris = Vec::with_capacity(mesh.faces.len());
        let mut face_ids = Vec::with_capacity(mesh.faces.len());
        let mut component = Vec::with_capacity(mesh.faces.len());
        let mut skipped = 0;
        for f in 0..mesh.faces.len() {
            let t = mesh.triangle(f);
            let area2 = norm(cross(sub(t[1], t[0]), sub(t[2], t[0])));
            if !(area2 > 1e-300) {
                skipped += 1;
                continue;
            }
            tris.push(t);
            face_ids.push(f);
            component.push(comp_all[f]);
        }
        if tris.is_empty() {
            bail!(Argument, "mesh has no non-degenerate triangles");
        }
        let (lo, hi) = bounds(tris.iter().flat_map(|t| t.iter().copied()));
        let pad = 1e-9 * (1.0 + norm(sub(hi, lo)));
        let lo = sub(lo, [pad; 3]);
        let hi = add(hi, [pad; 3]);
        let grid = CellGrid::build(lo, hi, tris.len().div_ceil(2), tris.len(), |i, push| {
            let (a, b) = bounds(tris[i].iter().copied());
            push(a, b)
        });
        let mut rng = Rng::new(SDF_RAY_SEED);
        let rays = [rng.unit_vector(), rng.unit_vector(), rng.unit_vector()];
        Ok(MeshSdf { tris, face_ids, component, n_components, grid, rays, skipped_degenerate: skipped })
    }

    /// Unsigned closest point query `(squared distance, point, face)`.
    pub fn closest(&self, p: Vec3) -> (f64, Vec3, usize) {
        let mut best = (f64::INFINITY, [0.0; 3], usize::MAX);
        self.grid.ring_search(p, |item| {
            let t = &self.tris[item as usize];
            let c = closest_point_on_triangle(p, t[0], t[1], t[2]);
            let d = dist2(c, p);
            if d < best.0 || (d == best.0 && (item as usize) < best.2) {
                best = (d, c, item as usize);
            }
            best.0
        });
        (best.0, best.1, self.face_ids[best.2])
    }

    /// Ray parity inside test; see the type docs.
    pub fn is_inside(&self, p: Vec3) -> bool {
        let votes = self.rays.iter().filter(|d| self.ray_inside(p, **d)).count();
        votes >= 2
    }

    fn ray_inside(&self, p: Vec3, dir: Vec3) -> bool {
        let mut parity = vec![false; self.n_components];
        self.traverse(p, dir, |tri, t_enter, t_exit| {
            let t = &self.tris[tri];
            if let Some(th) = ray_triangle(p, dir, t[0], t[1], t[2]) {
                if th > 0.0 && th >= t_enter && th < t_exit {
                    let c = self.component[tri] as usize;
                    parity[c] = !parity[c];
                }
            }
        });
        parity.iter().any(|&odd| odd)
    }

    /// 3D-DDA walk over the cells pierced by the ray `p + t·dir`, `t ≥ 0`.
    /// `visit(tri, t_enter, t_exit)` sees every triangle id of each cell with
    /// that cell's parameter interval, so hits are counted once by testing
    /// that they fall inside the interval.
    fn traverse(&self, p: Vec3, dir: Vec3, mut visit: impl FnMut(usize, f64, f64)) {
        let g = &self.grid;
        let hi = [
            g.origin[0] + g.dims[0] as f64 * g.cell,
            g.origin[1] + g.dims[1] as f64 * g.cell,
            g.origin[2] + g.dims[2] as f64 * g.cell,
        ];
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for k in 0..3 {
            if dir[k].abs() < 1e-300 {
                if p[k] < g.origin[k] || p[k] > hi[k] {
                    return;
                }
                continue;
            }
            let a = (g.origin[k] - p[k]) / dir[k];
            let b = (hi[k] - p[k]) / dir[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        if t0 > t1 {
            return;
        }
        let start = add(p, scale(dir, t0));
        let mut cell = g.clamp_cell(start);
        let mut step = [0isize; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for k in 0..3 {
            if dir[k] > 0.0 {
                step[k] = 1;
                let boundary = g.origin[k] + (cell[k] + 1) as f64 * g.cell;
                t_max[k] = (boundary - p[k]) / dir[k];
                t_delta[k] = g.cell / dir[k];
            } else if dir[k] < 0.0 {
                step[k] = -1;
                let boundary = g.origin[k] + cell[k] as f64 * g.cell;
                t_max[k] = (boundary - p[k]) / dir[k];
                t_delta[k] = -g.cell / dir[k];
            }
        }
        let mut t_enter = if t0 == 0.0 { f64::NEG_INFINITY } else { t0 };
        loop {
            let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            let t_exit = t_max[axis];
            for &tri in g.cell_items(g.flat(cell)) {
                visit(tri as usize, t_enter, t_exit);
            }
            let next = cell[axis] as isize + step[axis];
            if next < 0 || next >= g.dims[axis] as isize {
                return;
            }
            cell[axis] = next as usize;
            t_enter = t_exit;
            t_max[axis] += t_delta[axis];
        }
    }

    pub fn query(&self, p: Vec3) -> SurfaceQuery {
        let (d2, closest, face) = self.closest(p);
        let d = sqrt(d2);
        let distance = if d > 0.0 && self.is_inside(p) { -d } else { d };
        SurfaceQuery { distance, closest, face }
    }

    pub fn signed_distance(&self, p: Vec3) -> f64 {
        self.query(p).distance
    }
}

/// One-shot signed distance; build a [`MeshSdf`] for repeated queries.
pub fn signed_distance_to_mesh(point: Vec3, mesh: &TriMesh) -> Result<f64> {
    Ok(MeshSdf::new(mesh)?.signed_distance(point))
}

/// Area-weighted uniform surface samples with their barycentric records;
/// normals are the face normals.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<(PointCloudN, Vec<BaryRecord>)> {
    let mut cdf = Vec::with_capacity(mesh.faces.len());
    let mut total = 0.0;
    for f in 0..mesh.faces.len() {
        let a = mesh.face_area(f);
        total += if a.is_finite() { a } else { 0.0 };
        cdf.push(total);
    }
    if !(total > 0.0) {
        bail!(Argument, "mesh has no non-degenerate faces to sample");
    }
    let mut rng = Rng::new(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.uniform() * total;
        let mut f = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        // skip zero-area faces that share a cdf value with their successor
        while mesh.face_area(f) <= 0.0 && f + 1 < cdf.len() {
            f += 1;
        }
        let s = sqrt(rng.uniform());
        let r2 = rng.uniform();
        let w1 = s * (1.0 - r2);
        let w2 = s * r2;
        let w0 = 1.0 - w1 - w2;
        let rec = BaryRecord { face_index: f as u32, weights: [w0.max(0.0), w1, w2], vertex_ids: mesh.faces[f] };
        points.push(mesh.point_at(&rec));
        normals.push(mesh.face_normal(f));
        records.push(rec);
    }
    Ok((PointCloudN { points, normals: Some(normals) }, records))
}

/// Closed triangulated box with outward winding.
pub fn box_mesh(lo: Vec3, hi: Vec3) -> TriMesh {
    let v = |x: usize, y: usize, z: usize| -> Vec3 {
        [if x == 0 { lo[0] } else { hi[0] }, if y == 0 { lo[1] } else { hi[1] }, if z == 0 { lo[2] } else { hi[2] }]
    };
    let mut vertices = Vec::with_capacity(8);
    for x in 0..2 {
        for y in 0..2 {
            for z in 0..2 {
                vertices.push(v(x, y, z));
            }
        }
    }
    let id = |x: u32, y: u32, z: u32| x * 4 + y * 2 + z;
    let quads: [[u32; 4]; 6] = [
        [id(0, 0, 0), id(0, 0, 1), id(0, 1, 1), id(0, 1, 0)],
        [id(1, 0, 0), id(1, 1, 0), id(1, 1, 1), id(1, 0, 1)],
        [id(0, 0, 0), id(1, 0, 0), id(1, 0, 1), id(0, 0, 1)],
        [id(0, 1, 0), id(0, 1, 1), id(1, 1, 1), id(1, 1, 0)],
        [id(0, 0, 0), id(0, 1, 0), id(1, 1, 0), id(1, 0, 0)],
        [id(0, 0, 1), id(1, 0, 1), id(1, 1, 1), id(0, 1, 1)],
    ];
    let mut faces = Vec::with_capacity(12);
    for q in quads {
        faces.push([q[0], q[1], q[2]]);
        faces.push([q[0], q[2], q[3]]);
    }
    TriMesh { vertices, faces }
}

/// Icosphere obtained by `subdivisions` rounds of 4-to-1 splitting.
pub fn icosphere(center: Vec3, radius: f64, subdivisions: usize) -> TriMesh {
    let t = (1.0 + sqrt(5.0)) / 2.0;
    let mut vertices: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|v| normalize(*v))
    .collect();
    let mut faces: Vec<[u32; 3]> = alloc::vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut mid = alloc::collections::BTreeMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: u32, b: u32, vertices: &mut Vec<Vec3>| -> u32 {
            let key = if a < b { (a, b) } else { (b, a) };
            *mid.entry(key).or_insert_with(|| {
                vertices.push(normalize(scale(add(vertices[a as usize], vertices[b as usize]), 0.5)));
                (vertices.len() - 1) as u32
            })
        };
        for f in &faces {
            let ab = midpoint(f[0], f[1], &mut vertices);
            let bc = midpoint(f[1], f[2], &mut vertices);
            let ca = midpoint(f[2], f[0], &mut vertices);
            next.push([f[0], ab, ca]);
            next.push([f[1], bc, ab]);
            next.push([f[2], ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    let vertices = vertices.into_iter().map(|v| add(center, scale(v, radius))).collect();
    TriMesh { vertices, faces }
}
