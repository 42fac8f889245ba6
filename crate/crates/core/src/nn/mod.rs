//! Minimal reverse-mode-differentiable neural substrate.
//!
//! Exactly what the two autoencoders need: dense matrices ([`Tensor2`]),
//! linear layers, ReLU, LayerNorm, single-head scaled dot-product
//! self-attention, MSE loss, and Adam. Forward passes return explicit
//! caches; `backward` consumes them and accumulates parameter gradients
//! in place. Training runs in `f64` so analytic gradients can be checked
//! against central finite differences; checkpoints store `f32`.
//!
//! Parallelism is over independent output rows (or independent attention
//! samples), each computed in a fixed sequential order, so results do
//! not depend on the thread count.

mod adam;
mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_MAGIC};

use rand::Rng;
use rayon::prelude::*;

use crate::{real, Error, Real, Result};

/// Row-major 2-D matrix of training values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Tensor2 { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Same buffer, new dimensions. Row-major layout makes the
    /// (rows*k) x c <-> rows x (k*c) reinterpretation free.
    pub fn reshaped(&self, rows: usize, cols: usize) -> Tensor2<T> {
        assert_eq!(rows * cols, self.data.len(), "reshape size");
        Tensor2 {
            rows,
            cols,
            data: self.data.clone(),
        }
    }

    pub fn transpose(&self) -> Tensor2<T> {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor2<T>) {
        assert_eq!(self.data.len(), other.data.len(), "add size");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// Parameter with its gradient accumulator; shapes always match.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub w: Tensor2<T>,
    pub g: Tensor2<T>,
}

impl<T: Real> Param<T> {
    pub fn new(w: Tensor2<T>) -> Self {
        let g = Tensor2::zeros(w.rows, w.cols);
        Param { w, g }
    }

    pub fn zero_grad(&mut self) {
        self.g.data.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.w.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.data.is_empty()
    }

    /// Rounds every value through `f32`, the archive storage precision.
    /// Run before encoding so compression and decompression see
    /// bit-identical weights.
    pub fn freeze_to_f32(&mut self) {
        for v in self.w.data.iter_mut() {
            *v = real((v.to_f64().unwrap() as f32) as f64);
        }
    }
}

const PAR_WORK_THRESHOLD: usize = 32_768;

fn matmul_row<T: Real>(arow: &[T], b: &[T], out: &mut [T], p: usize) {
    for (k, &aik) in arow.iter().enumerate() {
        if aik != T::zero() {
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

/// a (n x m) times b (m x p). Parallel over output rows; deterministic
/// for any worker count.
pub fn matmul<T: Real>(a: &Tensor2<T>, b: &Tensor2<T>) -> Tensor2<T> {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions");
    let (n, m, p) = (a.rows, a.cols, b.cols);
    let mut out = Tensor2::zeros(n, p);
    if n * m * p >= PAR_WORK_THRESHOLD && n > 1 {
        out.data
            .par_chunks_mut(p)
            .enumerate()
            .for_each(|(i, row)| matmul_row(&a.data[i * m..(i + 1) * m], &b.data, row, p));
    } else {
        for i in 0..n {
            matmul_row(
                &a.data[i * m..(i + 1) * m],
                &b.data,
                &mut out.data[i * p..(i + 1) * p],
                p,
            );
        }
    }
    out
}

/// Glorot-style uniform init in +-sqrt(6/(d_in+d_out)).
pub fn init_weight<T: Real, R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Tensor2<T> {
    let a = (6.0 / (d_in + d_out) as f64).sqrt();
    let data = (0..d_in * d_out)
        .map(|_| real(rng.random_range(-a..=a)))
        .collect();
    Tensor2::from_vec(d_in, d_out, data)
}

/// Dense layer: `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear {
            w: Param::new(init_weight(d_in, d_out, rng)),
            b: Param::new(Tensor2::zeros(1, d_out)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.w.rows
    }

    pub fn d_out(&self) -> usize {
        self.w.w.cols
    }

    pub fn forward(&self, x: &Tensor2<T>) -> Result<Tensor2<T>> {
        if x.cols != self.d_in() {
            return Err(Error::ShapeMismatch(format!(
                "linear forward: input cols {} vs weight rows {}",
                x.cols,
                self.d_in()
            )));
        }
        let mut y = matmul(x, &self.w.w);
        for r in 0..y.rows {
            let row = &mut y.data[r * y.cols..(r + 1) * y.cols];
            for (o, &b) in row.iter_mut().zip(&self.b.w.data) {
                *o += b;
            }
        }
        debug_assert!(y.all_finite());
        Ok(y)
    }

    /// Accumulates dW and db, returns dx. `x` is the forward input.
    pub fn backward(&mut self, x: &Tensor2<T>, dy: &Tensor2<T>) -> Tensor2<T> {
        let dw = matmul(&x.transpose(), dy);
        self.w.g.add_assign(&dw);
        for r in 0..dy.rows {
            for c in 0..dy.cols {
                self.b.g.data[c] += dy.at(r, c);
            }
        }
        matmul(dy, &self.w.w.transpose())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

pub fn relu<T: Real>(x: &Tensor2<T>) -> Tensor2<T> {
    Tensor2 {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| v.max(T::zero())).collect(),
    }
}

pub fn relu_backward<T: Real>(x: &Tensor2<T>, dy: &Tensor2<T>) -> Tensor2<T> {
    assert_eq!(x.data.len(), dy.data.len(), "relu backward size");
    Tensor2 {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
            .collect(),
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Per-row standardization with learned affine: `y = g * xhat + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Tensor2<T>,
    pub inv_std: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(Tensor2::from_vec(1, dim, vec![T::one(); dim])),
            beta: Param::new(Tensor2::zeros(1, dim)),
            eps: LAYERNORM_EPS,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.w.cols
    }

    pub fn forward(&self, x: &Tensor2<T>) -> Result<(Tensor2<T>, LayerNormCache<T>)> {
        let d = self.dim();
        if x.cols != d {
            return Err(Error::ShapeMismatch(format!(
                "layernorm forward: input cols {} vs dim {d}",
                x.cols
            )));
        }
        let dn = real::<T>(d as f64);
        let eps = real::<T>(self.eps);
        let mut out = Tensor2::zeros(x.rows, d);
        let mut xhat = Tensor2::zeros(x.rows, d);
        let mut inv_std = vec![T::zero(); x.rows];
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / dn;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                let xh = (row[c] - mean) * istd;
                xhat.data[r * d + c] = xh;
                out.data[r * d + c] = self.gamma.w.data[c] * xh + self.beta.w.data[c];
            }
        }
        debug_assert!(out.all_finite());
        Ok((out, LayerNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &Tensor2<T>) -> Tensor2<T> {
        let d = self.dim();
        let dn = real::<T>(d as f64);
        let mut dx = Tensor2::zeros(dy.rows, d);
        for r in 0..dy.rows {
            let xhat = cache.xhat.row(r);
            let dyr = dy.row(r);
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for c in 0..d {
                self.gamma.g.data[c] += dyr[c] * xhat[c];
                self.beta.g.data[c] += dyr[c];
            }
            let dxhat: Vec<T> = (0..d).map(|c| dyr[c] * self.gamma.w.data[c]).collect();
            for c in 0..d {
                sum_dxhat += dxhat[c];
                sum_dxhat_xhat += dxhat[c] * xhat[c];
            }
            let istd = cache.inv_std[r];
            for c in 0..d {
                dx.data[r * d + c] =
                    istd * (dxhat[c] - sum_dxhat / dn - xhat[c] * sum_dxhat_xhat / dn);
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Numerically stabilized per-row softmax (in place).
fn softmax_rows<T: Real>(t: &mut Tensor2<T>) {
    for r in 0..t.rows {
        let row = &mut t.data[r * t.cols..(r + 1) * t.cols];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Single-head scaled dot-product self-attention:
/// `Softmax(Q Kt / sqrt(d_k)) V` with `Q = X Wq`, `K = X Wk`, `V = X Wv`.
///
/// Inputs stack several independent samples: an `(s*n) x d` matrix is
/// `s` samples of `n` rows each, and attention never mixes rows across
/// samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    pub x: Tensor2<T>,
    pub q: Tensor2<T>,
    pub k: Tensor2<T>,
    pub v: Tensor2<T>,
    /// Stacked per-sample n x n softmax weights.
    pub a: Tensor2<T>,
    pub sample_rows: usize,
}

impl<T: Real> Attention<T> {
    pub fn new<R: Rng>(d: usize, d_k: usize, d_v: usize, rng: &mut R) -> Self {
        Attention {
            wq: Param::new(init_weight(d, d_k, rng)),
            wk: Param::new(init_weight(d, d_k, rng)),
            wv: Param::new(init_weight(d, d_v, rng)),
        }
    }

    pub fn d(&self) -> usize {
        self.wq.w.rows
    }

    pub fn d_k(&self) -> usize {
        self.wq.w.cols
    }

    pub fn d_v(&self) -> usize {
        self.wv.w.cols
    }

    /// Learned parameters: d * (2 d_k + d_v).
    pub fn param_count(&self) -> usize {
        self.wq.len() + self.wk.len() + self.wv.len()
    }

    pub fn forward(
        &self,
        x: &Tensor2<T>,
        sample_rows: usize,
    ) -> Result<(Tensor2<T>, AttentionCache<T>)> {
        if x.cols != self.d() {
            return Err(Error::ShapeMismatch(format!(
                "attention forward: input cols {} vs d {}",
                x.cols,
                self.d()
            )));
        }
        if sample_rows == 0 || x.rows % sample_rows != 0 {
            return Err(Error::ShapeMismatch(format!(
                "attention forward: {} rows not a multiple of sample length {sample_rows}",
                x.rows
            )));
        }
        let n = sample_rows;
        let samples = x.rows / n;
        let (dk, dv) = (self.d_k(), self.d_v());
        let q = matmul(x, &self.wq.w);
        let k = matmul(x, &self.wk.w);
        let v = matmul(x, &self.wv.w);
        let scale = real::<T>(1.0 / (dk as f64).sqrt());

        let mut a = Tensor2::zeros(samples * n, n);
        let mut out = Tensor2::zeros(samples * n, dv);
        let do_sample = |s: usize, a_rows: &mut [T], out_rows: &mut [T]| {
            let qs = &q.data[s * n * dk..(s + 1) * n * dk];
            let ks = &k.data[s * n * dk..(s + 1) * n * dk];
            let vs = &v.data[s * n * dv..(s + 1) * n * dv];
            for i in 0..n {
                for j in 0..n {
                    let mut dot = T::zero();
                    for c in 0..dk {
                        dot += qs[i * dk + c] * ks[j * dk + c];
                    }
                    a_rows[i * n + j] = dot * scale;
                }
            }
            let mut at = Tensor2 {
                rows: n,
                cols: n,
                data: a_rows.to_vec(),
            };
            softmax_rows(&mut at);
            a_rows.copy_from_slice(&at.data);
            for i in 0..n {
                for j in 0..n {
                    let w = a_rows[i * n + j];
                    for c in 0..dv {
                        out_rows[i * dv + c] += w * vs[j * dv + c];
                    }
                }
            }
        };
        if samples > 1 && samples * n * n * dk >= PAR_WORK_THRESHOLD {
            a.data
                .par_chunks_mut(n * n)
                .zip(out.data.par_chunks_mut(n * dv))
                .enumerate()
                .for_each(|(s, (ar, or))| do_sample(s, ar, or));
        } else {
            for s in 0..samples {
                do_sample(
                    s,
                    &mut a.data[s * n * n..(s + 1) * n * n],
                    &mut out.data[s * n * dv..(s + 1) * n * dv],
                );
            }
        }
        debug_assert!(out.all_finite());
        let cache = AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            a,
            sample_rows: n,
        };
        Ok((out, cache))
    }

    pub fn backward(&mut self, cache: &AttentionCache<T>, dout: &Tensor2<T>) -> Tensor2<T> {
        let n = cache.sample_rows;
        let samples = cache.x.rows / n;
        let (dk, dv) = (self.d_k(), self.d_v());
        let scale = real::<T>(1.0 / (dk as f64).sqrt());

        let mut dq = Tensor2::zeros(cache.x.rows, dk);
        let mut dkm = Tensor2::zeros(cache.x.rows, dk);
        let mut dvm = Tensor2::zeros(cache.x.rows, dv);

        let do_sample = |s: usize, dq_s: &mut [T], dk_s: &mut [T], dv_s: &mut [T]| {
            let a_s = &cache.a.data[s * n * n..(s + 1) * n * n];
            let do_s = &dout.data[s * n * dv..(s + 1) * n * dv];
            let q_s = &cache.q.data[s * n * dk..(s + 1) * n * dk];
            let k_s = &cache.k.data[s * n * dk..(s + 1) * n * dk];
            let v_s = &cache.v.data[s * n * dv..(s + 1) * n * dv];

            // dV = At dO
            for j in 0..n {
                for i in 0..n {
                    let w = a_s[i * n + j];
                    if w != T::zero() {
                        for c in 0..dv {
                            dv_s[j * dv + c] += w * do_s[i * dv + c];
                        }
                    }
                }
            }
            // dA = dO Vt, then dS = A o (dA - rowsum(dA o A))
            let mut ds = vec![T::zero(); n * n];
            for i in 0..n {
                let mut rowsum = T::zero();
                for j in 0..n {
                    let mut da = T::zero();
                    for c in 0..dv {
                        da += do_s[i * dv + c] * v_s[j * dv + c];
                    }
                    ds[i * n + j] = da;
                    rowsum += da * a_s[i * n + j];
                }
                for j in 0..n {
                    ds[i * n + j] = a_s[i * n + j] * (ds[i * n + j] - rowsum);
                }
            }
            // dQ = dS K / sqrt(dk); dK = dSt Q / sqrt(dk)
            for i in 0..n {
                for j in 0..n {
                    let g = ds[i * n + j] * scale;
                    if g != T::zero() {
                        for c in 0..dk {
                            dq_s[i * dk + c] += g * k_s[j * dk + c];
                            dk_s[j * dk + c] += g * q_s[i * dk + c];
                        }
                    }
                }
            }
        };
        if samples > 1 && samples * n * n * dk >= PAR_WORK_THRESHOLD {
            dq.data
                .par_chunks_mut(n * dk)
                .zip(dkm.data.par_chunks_mut(n * dk))
                .zip(dvm.data.par_chunks_mut(n * dv))
                .enumerate()
                .for_each(|(s, ((dq_s, dk_s), dv_s))| do_sample(s, dq_s, dk_s, dv_s));
        } else {
            for s in 0..samples {
                do_sample(
                    s,
                    &mut dq.data[s * n * dk..(s + 1) * n * dk],
                    &mut dkm.data[s * n * dk..(s + 1) * n * dk],
                    &mut dvm.data[s * n * dv..(s + 1) * n * dv],
                );
            }
        }

        let xt = cache.x.transpose();
        self.wq.g.add_assign(&matmul(&xt, &dq));
        self.wk.g.add_assign(&matmul(&xt, &dkm));
        self.wv.g.add_assign(&matmul(&xt, &dvm));

        let mut dx = matmul(&dq, &self.wq.w.transpose());
        dx.add_assign(&matmul(&dkm, &self.wk.w.transpose()));
        dx.add_assign(&matmul(&dvm, &self.wv.w.transpose()));
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.wq, &mut self.wk, &mut self.wv]
    }
}

/// Mean over all elements of the squared difference.
pub fn mse<T: Real>(pred: &Tensor2<T>, target: &Tensor2<T>) -> Result<f64> {
    if pred.rows != target.rows || pred.cols != target.cols {
        return Err(Error::ShapeMismatch(format!(
            "mse: {}x{} vs {}x{}",
            pred.rows, pred.cols, target.rows, target.cols
        )));
    }
    let mut acc = 0.0f64;
    for (p, t) in pred.data.iter().zip(&target.data) {
        let d = p.to_f64().unwrap() - t.to_f64().unwrap();
        acc += d * d;
    }
    Ok(acc / pred.data.len() as f64)
}

/// d(mse)/d(pred) = 2 (pred - target) / count.
pub fn mse_backward<T: Real>(pred: &Tensor2<T>, target: &Tensor2<T>) -> Tensor2<T> {
    let scale = real::<T>(2.0 / pred.data.len() as f64);
    Tensor2 {
        rows: pred.rows,
        cols: pred.cols,
        data: pred
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| (p - t) * scale)
            .collect(),
    }
}
