//! Minimal dense-network toolkit with explicit backward passes: row-major
//! matrices, multi-input dense layers, softplus, and an Adam optimizer.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::Rng;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (a, b) in s.iter_mut().zip(self.row(r)) {
                *a += b;
            }
        }
        s
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies columns `[start, start + width)` into a new matrix.
    pub fn columns(&self, start: usize, width: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }
}

/// `c = alpha · op(a) · op(b) + beta · c` where `op` optionally transposes.
/// `a` is stored row-major as `m×k` (or `k×m` when `ta`), `b` as `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand sizes");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index addressed by these strides.
    unsafe {
        matrixmultiply::dgemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// A learnable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
    #[serde(skip)]
    pub m: Vec<f64>,
    #[serde(skip)]
    pub v: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Param { name: name.into(), shape, value, grad: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n] }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param::new(name, shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Bias-corrected Adam update; `step` counts from 1.
    pub fn adam_update(&mut self, cfg: &AdamConfig, lr: f64, step: u64) {
        let b1t = 1.0 - libm::pow(cfg.beta1, step as f64);
        let b2t = 1.0 - libm::pow(cfg.beta2, step as f64);
        for i in 0..self.value.len() {
            let g = self.grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            self.value[i] -= lr * mh / (libm::sqrt(vh) + cfg.eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Anything that owns learnable parameters.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }
}

/// How a dense layer's weights start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)` for weights and bias.
    Uniform,
    Zero,
}

/// One input of a [`Dense`] layer: either one row per sample or a single
/// row broadcast to every sample.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Rows(&'a Mat),
    Broadcast(&'a [f64]),
}

impl Input<'_> {
    fn width(&self) -> usize {
        match self {
            Input::Rows(m) => m.cols,
            Input::Broadcast(r) => r.len(),
        }
    }
}

/// Gradient with respect to one [`Input`].
#[derive(Debug, Clone, PartialEq)]
pub enum InputGrad {
    Rows(Mat),
    Broadcast(Vec<f64>),
}

impl InputGrad {
    pub fn into_rows(self) -> Mat {
        match self {
            InputGrad::Rows(m) => m,
            InputGrad::Broadcast(_) => panic!("expected a per-row gradient"),
        }
    }

    pub fn into_broadcast(self) -> Vec<f64> {
        match self {
            InputGrad::Broadcast(v) => v,
            InputGrad::Rows(_) => panic!("expected a broadcast gradient"),
        }
    }
}

/// Affine layer over the implicit concatenation of several inputs:
/// `y = Σ_i x_i W_i + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub blocks: Vec<Param>,
    pub bias: Param,
}

impl Dense {
    pub fn new(name: &str, in_widths: &[usize], out: usize, init: Init, rng: &mut Rng) -> Self {
        let fan_in: usize = in_widths.iter().sum();
        let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        let mut draw = |n: usize| -> Vec<f64> {
            match init {
                Init::Zero => vec![0.0; n],
                Init::Uniform => (0..n).map(|_| rng.range(-bound, bound)).collect(),
            }
        };
        let blocks = in_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let pname = if in_widths.len() == 1 { alloc::format!("{name}.weight") } else { alloc::format!("{name}.weight{i}") };
                Param::new(pname, vec![w, out], draw(w * out))
            })
            .collect();
        let bias = Param::new(alloc::format!("{name}.bias"), vec![out], draw(out));
        Dense { blocks, bias }
    }

    pub fn out_width(&self) -> usize {
        self.bias.len()
    }

    pub fn in_widths(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.shape[0]).collect()
    }

    fn check(&self, inputs: &[Input<'_>]) -> usize {
        assert_eq!(inputs.len(), self.blocks.len(), "dense layer input count");
        let mut rows = None;
        for (x, blk) in inputs.iter().zip(&self.blocks) {
            assert_eq!(x.width(), blk.shape[0], "dense layer input width for {}", blk.name);
            if let Input::Rows(m) = x {
                match rows {
                    None => rows = Some(m.rows),
                    Some(r) => assert_eq!(r, m.rows, "dense layer row count"),
                }
            }
        }
        rows.unwrap_or(1)
    }

    pub fn forward(&self, inputs: &[Input<'_>]) -> Mat {
        let n = self.check(inputs);
        let out = self.out_width();
        // broadcast inputs fold into an effective bias row
        let mut bias = self.bias.value.clone();
        for (x, blk) in inputs.iter().zip(&self.blocks) {
            if let Input::Broadcast(r) = x {
                gemm(1, r.len(), out, 1.0, r, false, &blk.value, false, 1.0, &mut bias);
            }
        }
        let mut y = Mat::zeros(n, out);
        for r in 0..n {
            y.row_mut(r).copy_from_slice(&bias);
        }
        for (x, blk) in inputs.iter().zip(&self.blocks) {
            if let Input::Rows(m) = x {
                gemm(n, m.cols, out, 1.0, &m.data, false, &blk.value, false, 1.0, &mut y.data);
            }
        }
        y
    }

    pub fn forward1(&self, x: &Mat) -> Mat {
        self.forward(&[Input::Rows(x)])
    }

    /// Accumulates parameter gradients and returns input gradients for the
    /// inputs flagged in `need`.
    pub fn backward(&mut self, inputs: &[Input<'_>], dy: &Mat, need: &[bool]) -> Vec<Option<InputGrad>> {
        let n = self.check(inputs);
        let out = self.out_width();
        assert_eq!((dy.rows, dy.cols), (n, out), "dense layer output gradient shape");
        let col = dy.col_sums();
        for (g, c) in self.bias.grad.iter_mut().zip(&col) {
            *g += c;
        }
        let mut grads = Vec::with_capacity(inputs.len());
        for (i, (x, blk)) in inputs.iter().zip(self.blocks.iter_mut()).enumerate() {
            let w = blk.shape[0];
            match x {
                Input::Rows(m) => {
                    gemm(w, n, out, 1.0, &m.data, true, &dy.data, false, 1.0, &mut blk.grad);
                    if need.get(i).copied().unwrap_or(false) {
                        let mut dx = Mat::zeros(n, w);
                        gemm(n, out, w, 1.0, &dy.data, false, &blk.value, true, 0.0, &mut dx.data);
                        grads.push(Some(InputGrad::Rows(dx)));
                    } else {
                        grads.push(None);
                    }
                }
                Input::Broadcast(r) => {
                    gemm(w, 1, out, 1.0, r, true, &col, false, 1.0, &mut blk.grad);
                    if need.get(i).copied().unwrap_or(false) {
                        let mut dx = vec![0.0; w];
                        gemm(1, out, w, 1.0, &col, false, &blk.value, true, 0.0, &mut dx);
                        grads.push(Some(InputGrad::Broadcast(dx)));
                    } else {
                        grads.push(None);
                    }
                }
            }
        }
        grads
    }

    pub fn backward1(&mut self, x: &Mat, dy: &Mat, need_dx: bool) -> Option<Mat> {
        self.backward(&[Input::Rows(x)], dy, &[need_dx]).pop().flatten().map(InputGrad::into_rows)
    }
}

impl Parameterized for Dense {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.blocks.iter().for_each(|p| f(p));
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.blocks.iter_mut().for_each(|p| f(p));
        f(&mut self.bias);
    }
}

#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn softplus(pre: &Mat) -> Mat {
    Mat { rows: pre.rows, cols: pre.cols, data: pre.data.iter().map(|&x| softplus_scalar(x)).collect() }
}

/// Multiplies `dy` in place by the softplus derivative at `pre`.
pub fn softplus_backward(pre: &Mat, dy: &mut Mat) {
    for (g, &x) in dy.data.iter_mut().zip(&pre.data) {
        *g *= sigmoid(x);
    }
}

/// Row-wise normalization to unit length, returning the norms for the backward pass.
pub fn normalize_rows3(raw: &[[f64; 3]]) -> (Vec<[f64; 3]>, Vec<f64>) {
    let mut out = Vec::with_capacity(raw.len());
    let mut norms = Vec::with_capacity(raw.len());
    for r in raw {
        let n = crate::linalg::norm(*r).max(1e-12);
        out.push(crate::linalg::scale(*r, 1.0 / n));
        norms.push(n);
    }
    (out, norms)
}

/// Backward of `u = r/‖r‖`: `dr = (du − u (u·du)) / ‖r‖`.
#[inline]
pub fn normalize_backward(u: [f64; 3], norm: f64, du: [f64; 3]) -> [f64; 3] {
    let d = crate::linalg::dot(u, du);
    [(du[0] - u[0] * d) / norm, (du[1] - u[1] * d) / norm, (du[2] - u[2] * d) / norm]
}

/// Row-wise max over consecutive groups of `group` rows, returning argmax rows.
pub fn max_pool_groups(x: &Mat, group: usize) -> (Mat, Vec<u32>) {
    assert!(group > 0 && x.rows % group == 0, "max pool group size");
    let g = x.rows / group;
    let mut out = Mat::zeros(g, x.cols);
    let mut arg = vec![0u32; g * x.cols];
    for gi in 0..g {
        let base = gi * group;
        let o = &mut out.data[gi * x.cols..(gi + 1) * x.cols];
        o.copy_from_slice(x.row(base));
        let a = &mut arg[gi * x.cols..(gi + 1) * x.cols];
        a.iter_mut().for_each(|v| *v = base as u32);
        for r in base + 1..base + group {
            for (c, &v) in x.row(r).iter().enumerate() {
                if v > o[c] {
                    o[c] = v;
                    a[c] = r as u32;
                }
            }
        }
    }
    (out, arg)
}

/// Routes pooled gradients back to the argmax rows.
pub fn max_pool_backward(dy: &Mat, arg: &[u32], rows: usize) -> Mat {
    let mut dx = Mat::zeros(rows, dy.cols);
    for gi in 0..dy.rows {
        for c in 0..dy.cols {
            let r = arg[gi * dy.cols + c] as usize;
            dx.data[r * dy.cols + c] += dy.data[gi * dy.cols + c];
        }
    }
    dx
}

/// Clips the global gradient norm of all parameters to `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(model: &mut dyn Parameterized, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit_params(&mut |p| sq += p.grad.iter().map(|g| g * g).sum::<f64>());
    let norm = libm::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        model.visit_params_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g *= s));
    }
    norm
}

/// Fails on the first parameter holding a non-finite value or gradient.
pub fn check_finite(model: &dyn Parameterized) -> Result<()> {
    let mut bad: Option<String> = None;
    model.visit_params(&mut |p| {
        if bad.is_none() && (p.value.iter().any(|v| !v.is_finite()) || p.grad.iter().any(|v| !v.is_finite())) {
            bad = Some(p.name.clone());
        }
    });
    if let Some(name) = bad {
        bail!(Numeric, "parameter `{name}` is not finite");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn dense_broadcast_matches_explicit_rows() {
        let mut rng = Rng::new(3);
        let mut d = Dense::new("t", &[2, 3], 4, Init::Uniform, &mut rng);
        let x = Mat::from_vec(2, 2, std::vec![0.1, 0.2, -0.3, 0.4]);
        let h = [0.5, -0.6, 0.7];
        let hh = Mat::from_vec(2, 3, [h, h].concat());
        let y1 = d.forward(&[Input::Rows(&x), Input::Broadcast(&h)]);
        let y2 = d.forward(&[Input::Rows(&x), Input::Rows(&hh)]);
        for (a, b) in y1.data.iter().zip(&y2.data) {
            assert!((a - b).abs() < 1e-14);
        }
        let dy = Mat::from_vec(2, 4, (0..8).map(|i| i as f64 * 0.1).collect());
        let g1 = d.backward(&[Input::Rows(&x), Input::Broadcast(&h)], &dy, &[false, true]);
        let g2 = d.backward(&[Input::Rows(&x), Input::Rows(&hh)], &dy, &[false, true]);
        let b1 = g1[1].clone().unwrap().into_broadcast();
        let b2 = g2[1].clone().unwrap().into_rows().col_sums();
        for (a, b) in b1.iter().zip(&b2) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn dense_gradient_finite_difference() {
        let mut rng = Rng::new(5);
        let mut d = Dense::new("t", &[3], 2, Init::Uniform, &mut rng);
        let x = Mat::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect());
        let wts: std::vec::Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let loss = |d: &Dense| -> f64 {
            let y = softplus(&d.forward1(&x));
            y.data.iter().zip(&wts).map(|(a, b)| a * b).sum()
        };
        let pre = d.forward1(&x);
        let mut dy = Mat::from_vec(4, 2, wts.clone());
        softplus_backward(&pre, &mut dy);
        d.zero_grad();
        d.backward1(&x, &dy, false);
        let h = 1e-6;
        for i in 0..d.blocks[0].len() {
            let mut p = d.clone();
            p.blocks[0].value[i] += h;
            let mut m = d.clone();
            m.blocks[0].value[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - d.blocks[0].grad[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::new("p", std::vec![2], std::vec![1.0, -1.0]);
        p.grad = std::vec![0.5, -2.0];
        p.adam_update(&AdamConfig::default(), 0.1, 1);
        assert!((p.value[0] - 0.9).abs() < 1e-6);
        assert!((p.value[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn max_pool_routes_to_argmax() {
        let x = Mat::from_vec(4, 2, std::vec![1.0, 5.0, 3.0, 2.0, 0.0, 0.0, -1.0, 1.0]);
        let (y, arg) = max_pool_groups(&x, 2);
        assert_eq!(y.data, [3.0, 5.0, 0.0, 1.0]);
        let dx = max_pool_backward(&Mat::from_vec(2, 2, std::vec![1.0, 2.0, 3.0, 4.0]), &arg, 4);
        assert_eq!(dx.data, [0.0, 2.0, 1.0, 0.0, 3.0, 0.0, 0.0, 4.0]);
    }
}
