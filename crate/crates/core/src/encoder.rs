//! Hierarchical point-set encoder: set-abstraction levels (farthest point
//! centers, k-nearest-neighbour groups, shared per-point network, max pool),
//! followed either by feature propagation back to every input point or by a
//! global max-pooled code.
//!
//! Neighbourhoods depend only on positions and are built once per point set
//! ([`Hierarchy`]); features flow through them on every forward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::geometry::{farthest_point_sample_from, knn_indices};
use crate::linalg::{dist2, sub, Vec3};
use crate::nn::{max_pool_backward, max_pool_groups, softplus, softplus_backward, Dense, Init, Input, Mat, Param, Parameterized};
use crate::rng::Rng;

/// Grouping of one set-abstraction level.
#[derive(Debug, Clone)]
pub struct SaGraph {
    /// Indices of this level's centers in the previous level.
    pub centers: Vec<usize>,
    pub k: usize,
    /// Row-major `centers × k` neighbour indices into the previous level.
    pub neighbors: Vec<usize>,
    /// Neighbour offsets from their center, one row per neighbour.
    pub rel: Mat,
}

/// Inverse-distance interpolation from a coarse level to the next finer one.
#[derive(Debug, Clone)]
pub struct FpGraph {
    pub idx: Vec<[usize; 3]>,
    pub weights: Vec<[f64; 3]>,
}

/// Precomputed neighbourhood structure of a point set.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    /// Positions per level; level 0 is the input set.
    pub positions: Vec<Vec<Vec3>>,
    pub sa: Vec<SaGraph>,
    /// `fp[l]` interpolates level `l + 1` onto level `l`.
    pub fp: Vec<FpGraph>,
}

/// Start index for farthest point sampling that does not depend on point
/// order: the point farthest from the centroid (ties to the lowest index).
pub fn geometric_start(points: &[Vec3]) -> usize {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for i in 0..3 {
            c[i] += p[i] / n;
        }
    }
    let mut best = (0, -1.0);
    for (i, p) in points.iter().enumerate() {
        let d = dist2(*p, c);
        if d > best.1 {
            best = (i, d);
        }
    }
    best.0
}

impl Hierarchy {
    /// Builds levels with the given center counts (clamped to the available
    /// points) and neighbourhood size `k`.
    pub fn build(points: &[Vec3], counts: &[usize], k: usize) -> Result<Self> {
        if points.is_empty() {
            bail!(Argument, "cannot build an encoder hierarchy over an empty point set");
        }
        if k == 0 {
            bail!(Argument, "neighbourhood size must be positive");
        }
        let mut positions = vec![points.to_vec()];
        let mut sa = Vec::with_capacity(counts.len());
        let mut fp = Vec::with_capacity(counts.len());
        for &count in counts {
            let prev = positions.last().unwrap();
            let count = count.clamp(1, prev.len());
            let centers = farthest_point_sample_from(prev, count, geometric_start(prev))?;
            let cpos: Vec<Vec3> = centers.iter().map(|&i| prev[i]).collect();
            let kk = k.min(prev.len());
            let neighbors = knn_indices(prev, &cpos, kk)?;
            let mut rel = Mat::zeros(count * kk, 3);
            for c in 0..count {
                for j in 0..kk {
                    let r = sub(prev[neighbors[c * kk + j]], cpos[c]);
                    rel.row_mut(c * kk + j).copy_from_slice(&r);
                }
            }
            let m = 3.min(count);
            let nn = knn_indices(&cpos, prev, m)?;
            let mut idx = Vec::with_capacity(prev.len());
            let mut weights = Vec::with_capacity(prev.len());
            for (i, p) in prev.iter().enumerate() {
                let mut id = [0usize; 3];
                let mut w = [0.0; 3];
                let mut total = 0.0;
                for j in 0..m {
                    let c = nn[i * m + j];
                    id[j] = c;
                    w[j] = 1.0 / (dist2(*p, cpos[c]) + 1e-8);
                    total += w[j];
                }
                for wj in w.iter_mut() {
                    *wj /= total;
                }
                idx.push(id);
                weights.push(w);
            }
            fp.push(FpGraph { idx, weights });
            sa.push(SaGraph { centers, k: kk, neighbors, rel });
            positions.push(cpos);
        }
        Ok(Hierarchy { positions, sa, fp })
    }

    pub fn levels(&self) -> usize {
        self.sa.len()
    }
}

/// Shared two-layer network of one set-abstraction level.
#[derive(Debug, Clone, PartialEq)]
pub struct SetAbstraction {
    pub l1: Dense,
    pub l2: Dense,
}

/// One feature-propagation layer (coarse interpolation plus skip features).
#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub layer: Dense,
}

/// How the encoder produces its output.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderHead {
    /// Per-input-point features via propagation layers (finest last).
    Propagate(Vec<Propagation>),
    /// One global code: a per-point layer on `[position, feature]` of the
    /// coarsest level, max pooled.
    GlobalMax(Dense),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierEncoder {
    pub in_dim: usize,
    pub out_dim: usize,
    pub sa: Vec<SetAbstraction>,
    pub head: EncoderHead,
}

struct SaCache {
    gathered: Mat,
    pre1: Mat,
    act1: Mat,
    pre2: Mat,
    arg: Vec<u32>,
}

struct FpCache {
    interp: Mat,
    pre: Mat,
    activated: bool,
}

/// Intermediate values kept for the backward pass.
pub struct EncoderCache {
    feats: Vec<Mat>,
    sa: Vec<SaCache>,
    /// Propagation caches in application order (coarsest first).
    fp: Vec<FpCache>,
    /// Propagated features per level, indexed like `feats`.
    prop: Vec<Mat>,
    global: Option<(Mat, Mat, Vec<u32>)>,
}

fn gather_rows(src: &Mat, rows: &[usize]) -> Mat {
    let mut out = Mat::zeros(rows.len(), src.cols);
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).copy_from_slice(src.row(r));
    }
    out
}

fn scatter_rows(grad: &Mat, rows: &[usize], into: &mut Mat) {
    for (i, &r) in rows.iter().enumerate() {
        let dst = &mut into.data[r * into.cols..(r + 1) * into.cols];
        for (d, g) in dst.iter_mut().zip(grad.row(i)) {
            *d += g;
        }
    }
}

impl HierEncoder {
    /// `widths[l]` is the feature width after level `l`. With `propagate`
    /// the output has one `out_dim` row per input point; otherwise a single row.
    pub fn new(name: &str, in_dim: usize, widths: &[usize], out_dim: usize, propagate: bool, rng: &mut Rng) -> Self {
        let mut sa = Vec::with_capacity(widths.len());
        let mut c_in = in_dim;
        for (l, &w) in widths.iter().enumerate() {
            sa.push(SetAbstraction {
                l1: Dense::new(&format!("{name}.sa{l}.l1"), &[3, c_in], w, Init::Uniform, rng),
                l2: Dense::new(&format!("{name}.sa{l}.l2"), &[w], w, Init::Uniform, rng),
            });
            c_in = w;
        }
        let head = if propagate {
            // propagation l maps level l+1 (width widths[l] or out_dim) onto level l
            let mut fp = Vec::with_capacity(widths.len());
            for l in (0..widths.len()).rev() {
                let coarse = if l + 1 == widths.len() { widths[l] } else { out_dim };
                let skip = if l == 0 { in_dim } else { widths[l - 1] };
                fp.push(Propagation {
                    layer: Dense::new(&format!("{name}.fp{l}"), &[coarse, skip], out_dim, Init::Uniform, rng),
                });
            }
            EncoderHead::Propagate(fp)
        } else {
            EncoderHead::GlobalMax(Dense::new(&format!("{name}.global"), &[3, c_in], out_dim, Init::Uniform, rng))
        };
        HierEncoder { in_dim, out_dim, sa, head }
    }

    pub fn forward(&self, h: &Hierarchy, f0: &Mat) -> Result<(Mat, EncoderCache)> {
        if h.levels() != self.sa.len() {
            bail!(Validation, "hierarchy has {} levels, encoder expects {}", h.levels(), self.sa.len());
        }
        if f0.rows != h.positions[0].len() || f0.cols != self.in_dim {
            bail!(
                Validation,
                "encoder input is {}×{}, expected {}×{}",
                f0.rows,
                f0.cols,
                h.positions[0].len(),
                self.in_dim
            );
        }
        let mut feats = vec![f0.clone()];
        let mut sa_caches = Vec::with_capacity(self.sa.len());
        for (layer, g) in self.sa.iter().zip(&h.sa) {
            let gathered = gather_rows(feats.last().unwrap(), &g.neighbors);
            let pre1 = layer.l1.forward(&[Input::Rows(&g.rel), Input::Rows(&gathered)]);
            let act1 = softplus(&pre1);
            let pre2 = layer.l2.forward1(&act1);
            let act2 = softplus(&pre2);
            let (pooled, arg) = max_pool_groups(&act2, g.k);
            feats.push(pooled);
            sa_caches.push(SaCache { gathered, pre1, act1, pre2, arg });
        }
        let levels = self.sa.len();
        match &self.head {
            EncoderHead::Propagate(fp) => {
                let mut prop: Vec<Mat> = vec![Mat::zeros(0, 0); levels + 1];
                prop[levels] = feats[levels].clone();
                let mut caches = Vec::with_capacity(levels);
                for (step, layer) in fp.iter().enumerate() {
                    let l = levels - 1 - step;
                    let g = &h.fp[l];
                    let coarse = &prop[l + 1];
                    let mut interp = Mat::zeros(g.idx.len(), coarse.cols);
                    for (i, (id, w)) in g.idx.iter().zip(&g.weights).enumerate() {
                        let row = interp.row_mut(i);
                        for j in 0..3 {
                            if w[j] == 0.0 {
                                continue;
                            }
                            for (o, v) in row.iter_mut().zip(coarse.row(id[j])) {
                                *o += w[j] * v;
                            }
                        }
                    }
                    let pre = layer.layer.forward(&[Input::Rows(&interp), Input::Rows(&feats[l])]);
                    let activated = l != 0;
                    let out = if activated { softplus(&pre) } else { pre.clone() };
                    prop[l] = out;
                    caches.push(FpCache { interp, pre, activated });
                }
                let out = prop[0].clone();
                Ok((out, EncoderCache { feats, sa: sa_caches, fp: caches, prop, global: None }))
            }
            EncoderHead::GlobalMax(layer) => {
                let pos = Mat::from_vec(h.positions[levels].len(), 3, h.positions[levels].iter().flatten().copied().collect());
                let pre = layer.forward(&[Input::Rows(&pos), Input::Rows(&feats[levels])]);
                let (code, arg) = max_pool_groups(&pre, pre.rows);
                Ok((code, EncoderCache { feats, sa: sa_caches, fp: Vec::new(), prop: Vec::new(), global: Some((pos, pre, arg)) }))
            }
        }
    }

    /// Accumulates parameter gradients for an output gradient `d_out`.
    pub fn backward(&mut self, h: &Hierarchy, cache: &EncoderCache, d_out: &Mat) {
        let levels = self.sa.len();
        // gradient w.r.t. the raw set-abstraction features of each level
        let mut d_feats: Vec<Mat> = cache.feats.iter().map(|f| Mat::zeros(f.rows, f.cols)).collect();
        match &mut self.head {
            EncoderHead::Propagate(fp) => {
                let mut d_prop = d_out.clone();
                for (step, layer) in fp.iter_mut().enumerate().rev() {
                    let l = levels - 1 - step;
                    let c = &cache.fp[step];
                    let mut d_pre = d_prop;
                    if c.activated {
                        softplus_backward(&c.pre, &mut d_pre);
                    }
                    let mut grads =
                        layer.layer.backward(&[Input::Rows(&c.interp), Input::Rows(&cache.feats[l])], &d_pre, &[true, l > 0]);
                    if let Some(skip) = grads.pop().flatten() {
                        d_feats[l].add_assign(&skip.into_rows());
                    }
                    let d_interp = grads.pop().flatten().unwrap().into_rows();
                    let coarse_rows = cache.prop[l + 1].rows;
                    let mut d_coarse = Mat::zeros(coarse_rows, d_interp.cols);
                    let g = &h.fp[l];
                    for (i, (id, w)) in g.idx.iter().zip(&g.weights).enumerate() {
                        for j in 0..3 {
                            if w[j] == 0.0 {
                                continue;
                            }
                            let dst = &mut d_coarse.data[id[j] * d_interp.cols..(id[j] + 1) * d_interp.cols];
                            for (d, v) in dst.iter_mut().zip(d_interp.row(i)) {
                                *d += w[j] * v;
                            }
                        }
                    }
                    d_prop = d_coarse;
                }
                // the coarsest propagated features are the raw level features
                d_feats[levels].add_assign(&d_prop);
            }
            EncoderHead::GlobalMax(layer) => {
                let (pos, pre, arg) = cache.global.as_ref().expect("global cache");
                let d_pre = max_pool_backward(d_out, arg, pre.rows);
                let mut grads = layer.backward(&[Input::Rows(pos), Input::Rows(&cache.feats[levels])], &d_pre, &[false, true]);
                d_feats[levels].add_assign(&grads.pop().flatten().unwrap().into_rows());
            }
        }
        for l in (0..levels).rev() {
            let c = &cache.sa[l];
            let g = &h.sa[l];
            let layer = &mut self.sa[l];
            let mut d_act2 = max_pool_backward(&d_feats[l + 1], &c.arg, c.pre2.rows);
            softplus_backward(&c.pre2, &mut d_act2);
            let mut d_act1 = layer.l2.backward1(&c.act1, &d_act2, true).unwrap();
            softplus_backward(&c.pre1, &mut d_act1);
            let need_input = l > 0;
            let mut grads = layer.l1.backward(&[Input::Rows(&g.rel), Input::Rows(&c.gathered)], &d_act1, &[false, need_input]);
            if need_input {
                let d_gathered = grads.pop().flatten().unwrap().into_rows();
                scatter_rows(&d_gathered, &g.neighbors, &mut d_feats[l]);
            }
        }
    }
}

impl Parameterized for HierEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        for s in &self.sa {
            s.l1.visit_params(f);
            s.l2.visit_params(f);
        }
        match &self.head {
            EncoderHead::Propagate(fp) => fp.iter().for_each(|p| p.layer.visit_params(f)),
            EncoderHead::GlobalMax(d) => d.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for s in &mut self.sa {
            s.l1.visit_params_mut(f);
            s.l2.visit_params_mut(f);
        }
        match &mut self.head {
            EncoderHead::Propagate(fp) => fp.iter_mut().for_each(|p| p.layer.visit_params_mut(f)),
            EncoderHead::GlobalMax(d) => d.visit_params_mut(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut r = Rng::new(seed);
        (0..n).map(|_| [r.normal(), r.normal(), r.normal()]).collect()
    }

    fn weighted_sum(out: &Mat, w: &[f64]) -> f64 {
        out.data.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    fn check_grads(propagate: bool) {
        let pts = cloud(40, 1);
        let h = Hierarchy::build(&pts, &[16, 4], 5).unwrap();
        let mut rng = Rng::new(2);
        let mut enc = HierEncoder::new("e", 3, &[6, 5], 4, propagate, &mut rng);
        let f0 = Mat::from_vec(40, 3, pts.iter().flatten().map(|v| v * 0.7).collect());
        let (out, cache) = enc.forward(&h, &f0).unwrap();
        let w: Vec<f64> = (0..out.data.len()).map(|_| rng.normal()).collect();
        enc.zero_grad();
        enc.backward(&h, &cache, &Mat::from_vec(out.rows, out.cols, w.clone()));
        let mut analytic = Vec::new();
        enc.visit_params(&mut |p| analytic.extend_from_slice(&p.grad));
        let mut flat = Vec::new();
        enc.visit_params(&mut |p| flat.extend_from_slice(&p.value));
        let set = |e: &mut HierEncoder, vals: &[f64]| {
            let mut off = 0;
            e.visit_params_mut(&mut |p| {
                let n = p.value.len();
                p.value.copy_from_slice(&vals[off..off + n]);
                off += n;
            });
        };
        let eps = 1e-6;
        for i in (0..flat.len()).step_by(7) {
            let mut e2 = enc.clone();
            let mut v = flat.clone();
            v[i] += eps;
            set(&mut e2, &v);
            let lp = weighted_sum(&e2.forward(&h, &f0).unwrap().0, &w);
            v[i] -= 2.0 * eps;
            set(&mut e2, &v);
            let lm = weighted_sum(&e2.forward(&h, &f0).unwrap().0, &w);
            let fd = (lp - lm) / (2.0 * eps);
            let err = (fd - analytic[i]).abs() / (1e-6 + fd.abs().max(analytic[i].abs()));
            assert!(err < 1e-4, "param {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn propagate_gradients() {
        check_grads(true);
    }

    #[test]
    fn global_gradients() {
        check_grads(false);
    }

    #[test]
    fn propagate_shape() {
        let pts = cloud(30, 4);
        let h = Hierarchy::build(&pts, &[10, 3], 4).unwrap();
        let enc = HierEncoder::new("e", 3, &[5, 5], 7, true, &mut Rng::new(0));
        let f0 = Mat::from_vec(30, 3, pts.iter().flatten().copied().collect());
        let (out, _) = enc.forward(&h, &f0).unwrap();
        assert_eq!((out.rows, out.cols), (30, 7));
    }
}
