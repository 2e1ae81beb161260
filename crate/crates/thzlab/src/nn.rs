//! Minimal differentiable primitives and the five-branch
//! subspace-attention restoration network, with hand-written backward
//! passes and an Adam training loop. Everything runs single-threaded in
//! f64 so results are bit-reproducible for a fixed seed.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::spectral::FeatureStack;
use crate::tensorio::{self, Image2D};
use crate::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
/// A basis vector whose residual norm falls below this fraction of its
/// pre-orthogonalization norm is treated as linearly dependent.
const GS_DEGENERATE: f64 = 1e-7;

// ---------------------------------------------------------------------------
// parameters

/// One named tensor with gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub data: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    m: ArrayD<f64>,
    v: ArrayD<f64>,
    /// Running batch-norm statistics live here too but are never stepped.
    pub trainable: bool,
}

/// Flat, name-indexed parameter store shared by all modules of a net.
#[derive(Debug, Clone)]
pub struct ParamSet {
    items: Vec<Parameter>,
    by_name: HashMap<String, usize>,
    adam_t: u64,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet {
            items: Vec::new(),
            by_name: HashMap::new(),
            adam_t: 0,
        }
    }

    pub fn add(&mut self, name: &str, data: ArrayD<f64>, trainable: bool) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {}",
            name
        );
        let idx = self.items.len();
        let zeros = ArrayD::zeros(data.raw_dim());
        self.items.push(Parameter {
            name: name.to_string(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            data,
            trainable,
        });
        self.by_name.insert(name.to_string(), idx);
        idx
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.items[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.items[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.by_name.get(name).map(|&i| &self.items[i])
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.items
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.data.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.items {
            p.grad.fill(0.0);
        }
    }

    /// One Adam update over all trainable parameters.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.adam_t += 1;
        let t = self.adam_t as f64;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for p in &mut self.items {
            if !p.trainable {
                continue;
            }
            for ((d, &g), (m, v)) in p
                .data
                .iter_mut()
                .zip(p.grad.iter())
                .zip(p.m.iter_mut().zip(p.v.iter_mut()))
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *d -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Serialize every tensor as a THZT file inside `dir`, plus a
    /// manifest mapping parameter names to file names. Values are
    /// truncated to f32 on disk.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let mut manifest = Vec::new();
        for (i, p) in self.items.iter().enumerate() {
            let fname = format!("p{:04}.thzt", i);
            let flat: Vec<f32> = p.data.iter().map(|&v| v as f32).collect();
            let t = tensorio::Tensor::from_real(p.data.shape(), flat)?;
            tensorio::write_thzt(&t, dir.join(&fname))?;
            manifest.push((
                p.name.clone(),
                format!("{} {}", fname, if p.trainable { 1 } else { 0 }),
            ));
        }
        tensorio::write_sidecar(&manifest, dir.join("manifest.txt"))
    }

    /// Load tensors saved by [`ParamSet::save`] into this set; every
    /// stored name must match an existing parameter of the same shape.
    pub fn load_into(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (name, val) in tensorio::read_sidecar(dir.join("manifest.txt"))? {
            let fname = val.split_whitespace().next().unwrap_or("");
            let idx = *self.by_name.get(&name).ok_or_else(|| {
                Error::InvalidArgument(format!("unknown parameter {:?} in manifest", name))
            })?;
            let t = tensorio::read_thzt(dir.join(fname))?;
            let flat = t.as_real()?;
            let p = &mut self.items[idx];
            if t.shape() != p.data.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {}: stored {:?} vs expected {:?}",
                    name,
                    t.shape(),
                    p.data.shape()
                )));
            }
            for (d, &s) in p.data.iter_mut().zip(flat.iter()) {
                *d = s as f64;
            }
        }
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

// ---------------------------------------------------------------------------
// primitive ops

/// Same-padded stride-1 2-D convolution.
pub fn conv2d_fwd(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: Option<&Array1<f64>>,
) -> Result<Array4<f64>> {
    let (nb, ci, h, wd) = x.dim();
    let (co, ci_w, kl, kl2) = w.dim();
    if ci != ci_w || kl != kl2 || kl % 2 == 0 {
        return Err(Error::ShapeMismatch(format!(
            "conv weight {:?} incompatible with input {:?}",
            w.dim(),
            x.dim()
        )));
    }
    let p = kl / 2;
    let mut y = Array4::<f64>::zeros((nb, co, h, wd));
    for bi in 0..nb {
        for o in 0..co {
            if let Some(bias) = b {
                y.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), o)
                    .fill(bias[o]);
            }
            for c in 0..ci {
                for di in 0..kl {
                    for dj in 0..kl {
                        let wv = w[(o, c, di, dj)];
                        if wv == 0.0 {
                            continue;
                        }
                        for i in 0..h {
                            let si = i as isize + di as isize - p as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for j in 0..wd {
                                let sj = j as isize + dj as isize - p as isize;
                                if sj < 0 || sj >= wd as isize {
                                    continue;
                                }
                                y[(bi, o, i, j)] += x[(bi, c, si as usize, sj as usize)] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of [`conv2d_fwd`] w.r.t. input, weight, and bias.
pub fn conv2d_bwd(
    x: &Array4<f64>,
    w: &Array4<f64>,
    gy: &Array4<f64>,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (nb, ci, h, wd) = x.dim();
    let (co, _, kl, _) = w.dim();
    let p = kl / 2;
    let mut gx = Array4::<f64>::zeros(x.dim());
    let mut gw = Array4::<f64>::zeros(w.dim());
    let mut gb = Array1::<f64>::zeros(co);
    for bi in 0..nb {
        for o in 0..co {
            for i in 0..h {
                for j in 0..wd {
                    gb[o] += gy[(bi, o, i, j)];
                }
            }
            for c in 0..ci {
                for di in 0..kl {
                    for dj in 0..kl {
                        let wv = w[(o, c, di, dj)];
                        let mut acc = 0.0;
                        for i in 0..h {
                            let si = i as isize + di as isize - p as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for j in 0..wd {
                                let sj = j as isize + dj as isize - p as isize;
                                if sj < 0 || sj >= wd as isize {
                                    continue;
                                }
                                let g = gy[(bi, o, i, j)];
                                acc += g * x[(bi, c, si as usize, sj as usize)];
                                gx[(bi, c, si as usize, sj as usize)] += g * wv;
                            }
                        }
                        gw[(o, c, di, dj)] += acc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Per-channel statistics cached for the batch-norm backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    training: bool,
}

/// Batch normalization. In training mode batch statistics are used and
/// the running statistics are updated in place; in eval mode the stored
/// running statistics normalize the input.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d_fwd(
    x: &Array4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    running_mean: &mut Array1<f64>,
    running_var: &mut Array1<f64>,
    training: bool,
) -> Result<(Array4<f64>, BnCache)> {
    let (nb, c, h, w) = x.dim();
    let n = (nb * h * w) as f64;
    if training && (nb * h * w) < 2 {
        return Err(Error::InvalidArgument(
            "batch norm needs at least 2 values per channel in training mode".into(),
        ));
    }
    let mut y = Array4::<f64>::zeros(x.dim());
    let mut xhat = Array4::<f64>::zeros(x.dim());
    let mut inv_std = Array1::<f64>::zeros(c);
    for ch in 0..c {
        let (mean, var) = if training {
            let mut m = 0.0;
            for bi in 0..nb {
                for i in 0..h {
                    for j in 0..w {
                        m += x[(bi, ch, i, j)];
                    }
                }
            }
            m /= n;
            let mut v = 0.0;
            for bi in 0..nb {
                for i in 0..h {
                    for j in 0..w {
                        v += (x[(bi, ch, i, j)] - m).powi(2);
                    }
                }
            }
            v /= n;
            running_mean[ch] = (1.0 - BN_MOMENTUM) * running_mean[ch] + BN_MOMENTUM * m;
            running_var[ch] = (1.0 - BN_MOMENTUM) * running_var[ch] + BN_MOMENTUM * v;
            (m, v)
        } else {
            (running_mean[ch], running_var[ch])
        };
        let s = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = s;
        for bi in 0..nb {
            for i in 0..h {
                for j in 0..w {
                    let xh = (x[(bi, ch, i, j)] - mean) * s;
                    xhat[(bi, ch, i, j)] = xh;
                    y[(bi, ch, i, j)] = gamma[ch] * xh + beta[ch];
                }
            }
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            training,
        },
    ))
}

/// Gradients of [`batchnorm2d_fwd`].
pub fn batchnorm2d_bwd(
    cache: &BnCache,
    gamma: &Array1<f64>,
    gy: &Array4<f64>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (nb, c, h, w) = gy.dim();
    let n = (nb * h * w) as f64;
    let mut gx = Array4::<f64>::zeros(gy.dim());
    let mut ggamma = Array1::<f64>::zeros(c);
    let mut gbeta = Array1::<f64>::zeros(c);
    for ch in 0..c {
        let mut sum_gy = 0.0;
        let mut sum_gy_xhat = 0.0;
        for bi in 0..nb {
            for i in 0..h {
                for j in 0..w {
                    let g = gy[(bi, ch, i, j)];
                    sum_gy += g;
                    sum_gy_xhat += g * cache.xhat[(bi, ch, i, j)];
                }
            }
        }
        ggamma[ch] = sum_gy_xhat;
        gbeta[ch] = sum_gy;
        let scale = gamma[ch] * cache.inv_std[ch];
        for bi in 0..nb {
            for i in 0..h {
                for j in 0..w {
                    let g = gy[(bi, ch, i, j)];
                    gx[(bi, ch, i, j)] = if cache.training {
                        scale
                            * (g - sum_gy / n
                                - cache.xhat[(bi, ch, i, j)] * sum_gy_xhat / n)
                    } else {
                        scale * g
                    };
                }
            }
        }
    }
    (gx, ggamma, gbeta)
}

pub fn relu_fwd(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_bwd(x: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
    let mut gx = gy.clone();
    for (g, &v) in gx.iter_mut().zip(x.iter()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}

pub fn sigmoid_fwd(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Backward through sigmoid given the forward *output*.
pub fn sigmoid_bwd(y: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
    let mut gx = gy.clone();
    for (g, &s) in gx.iter_mut().zip(y.iter()) {
        *g *= s * (1.0 - s);
    }
    gx
}

/// Column-wise softmax over the first axis of a 2-D array.
pub fn softmax_cols_fwd(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut col in y.axis_iter_mut(Axis(1)) {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in col.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in col.iter_mut() {
            *v /= sum;
        }
    }
    y
}

/// Backward through column-wise softmax given the forward output.
pub fn softmax_cols_bwd(y: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
    let mut gx = Array2::<f64>::zeros(y.raw_dim());
    for k in 0..y.ncols() {
        let dot: f64 = (0..y.nrows()).map(|s| y[(s, k)] * gy[(s, k)]).sum();
        for s in 0..y.nrows() {
            gx[(s, k)] = y[(s, k)] * (gy[(s, k)] - dot);
        }
    }
    gx
}

/// 2x2 average pooling; requires even spatial dims.
pub fn downsample_half_fwd(x: &Array4<f64>) -> Result<Array4<f64>> {
    let (nb, c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "downsample needs even dims, got {}x{}",
            h, w
        )));
    }
    let mut y = Array4::<f64>::zeros((nb, c, h / 2, w / 2));
    for bi in 0..nb {
        for ch in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    y[(bi, ch, i, j)] = 0.25
                        * (x[(bi, ch, 2 * i, 2 * j)]
                            + x[(bi, ch, 2 * i + 1, 2 * j)]
                            + x[(bi, ch, 2 * i, 2 * j + 1)]
                            + x[(bi, ch, 2 * i + 1, 2 * j + 1)]);
                }
            }
        }
    }
    Ok(y)
}

pub fn downsample_half_bwd(gy: &Array4<f64>) -> Array4<f64> {
    let (nb, c, h2, w2) = gy.dim();
    let mut gx = Array4::<f64>::zeros((nb, c, h2 * 2, w2 * 2));
    for bi in 0..nb {
        for ch in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    let g = 0.25 * gy[(bi, ch, i, j)];
                    gx[(bi, ch, 2 * i, 2 * j)] = g;
                    gx[(bi, ch, 2 * i + 1, 2 * j)] = g;
                    gx[(bi, ch, 2 * i, 2 * j + 1)] = g;
                    gx[(bi, ch, 2 * i + 1, 2 * j + 1)] = g;
                }
            }
        }
    }
    gx
}

#[inline]
fn bilinear_taps(i: usize, n_in: usize) -> (usize, usize, f64) {
    // output sample centers at half-pixel positions of the source grid
    let src = (i as f64 + 0.5) / 2.0 - 0.5;
    let i0 = src.floor();
    let t = src - i0;
    let a = (i0.max(0.0) as usize).min(n_in - 1);
    let b = ((i0 + 1.0).max(0.0) as usize).min(n_in - 1);
    (a, b, t)
}

/// 2x bilinear upsampling.
pub fn upsample_double_fwd(x: &Array4<f64>) -> Array4<f64> {
    let (nb, c, h, w) = x.dim();
    let (h2, w2) = (h * 2, w * 2);
    let mut y = Array4::<f64>::zeros((nb, c, h2, w2));
    for bi in 0..nb {
        for ch in 0..c {
            for i in 0..h2 {
                let (i0, i1, ti) = bilinear_taps(i, h);
                for j in 0..w2 {
                    let (j0, j1, tj) = bilinear_taps(j, w);
                    y[(bi, ch, i, j)] = (1.0 - ti) * (1.0 - tj) * x[(bi, ch, i0, j0)]
                        + (1.0 - ti) * tj * x[(bi, ch, i0, j1)]
                        + ti * (1.0 - tj) * x[(bi, ch, i1, j0)]
                        + ti * tj * x[(bi, ch, i1, j1)];
                }
            }
        }
    }
    y
}

pub fn upsample_double_bwd(gy: &Array4<f64>) -> Array4<f64> {
    let (nb, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<f64>::zeros((nb, c, h, w));
    for bi in 0..nb {
        for ch in 0..c {
            for i in 0..h2 {
                let (i0, i1, ti) = bilinear_taps(i, h);
                for j in 0..w2 {
                    let (j0, j1, tj) = bilinear_taps(j, w);
                    let g = gy[(bi, ch, i, j)];
                    gx[(bi, ch, i0, j0)] += (1.0 - ti) * (1.0 - tj) * g;
                    gx[(bi, ch, i0, j1)] += (1.0 - ti) * tj * g;
                    gx[(bi, ch, i1, j0)] += ti * (1.0 - tj) * g;
                    gx[(bi, ch, i1, j1)] += ti * tj * g;
                }
            }
        }
    }
    gx
}

fn concat_channels(parts: &[&Array4<f64>]) -> Array4<f64> {
    let (nb, _, h, w) = parts[0].dim();
    let total: usize = parts.iter().map(|p| p.dim().1).sum();
    let mut out = Array4::<f64>::zeros((nb, total, h, w));
    let mut off = 0;
    for p in parts {
        let c = p.dim().1;
        out.slice_mut(ndarray::s![.., off..off + c, .., ..]).assign(p);
        off += c;
    }
    out
}

fn split_channels(g: &Array4<f64>, sizes: &[usize]) -> Vec<Array4<f64>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &c in sizes {
        out.push(g.slice(ndarray::s![.., off..off + c, .., ..]).to_owned());
        off += c;
    }
    out
}

// ---------------------------------------------------------------------------
// modified Gram–Schmidt over the flattened spatial axis

/// Intermediate states needed to differentiate through the
/// orthonormalization: for each vector, the value of `v` before every
/// projection-subtraction step, the projection coefficients, and the
/// final norm.
#[derive(Debug, Clone)]
pub struct GsCache {
    /// (batch, k, hw) inputs
    pub input: Array3<f64>,
    /// v_states[b][i][j] = v_i before subtracting its projection on q_j
    v_states: Vec<Vec<Vec<Array1<f64>>>>,
    norms: Vec<Vec<f64>>,
    degenerate: Vec<Vec<bool>>,
}

/// Orthonormalize `k` maps per batch element via modified Gram–Schmidt
/// on the flattened spatial axis. Vectors that become (numerically)
/// linearly dependent are replaced by zero.
pub fn gram_schmidt_fwd(basis: &Array3<f64>) -> (Array3<f64>, GsCache) {
    let (nb, k, hw) = basis.dim();
    let mut q = Array3::<f64>::zeros((nb, k, hw));
    let mut v_states = Vec::with_capacity(nb);
    let mut norms = Vec::with_capacity(nb);
    let mut degenerate = Vec::with_capacity(nb);
    for bi in 0..nb {
        let mut states_b = Vec::with_capacity(k);
        let mut norms_b = Vec::with_capacity(k);
        let mut degen_b = Vec::with_capacity(k);
        for i in 0..k {
            let mut v: Array1<f64> = basis.slice(ndarray::s![bi, i, ..]).to_owned();
            let orig_norm = v.dot(&v).sqrt();
            let mut states_i = Vec::with_capacity(i);
            for j in 0..i {
                states_i.push(v.clone());
                let qj = q.slice(ndarray::s![bi, j, ..]);
                let r = v.dot(&qj);
                for (vv, &qv) in v.iter_mut().zip(qj.iter()) {
                    *vv -= r * qv;
                }
            }
            let n = v.dot(&v).sqrt();
            let degen = n <= GS_DEGENERATE * orig_norm.max(1e-30) || orig_norm == 0.0;
            if degen {
                q.slice_mut(ndarray::s![bi, i, ..]).fill(0.0);
            } else {
                let mut row = q.slice_mut(ndarray::s![bi, i, ..]);
                for (o, &vv) in row.iter_mut().zip(v.iter()) {
                    *o = vv / n;
                }
            }
            states_i.push(v);
            states_b.push(states_i);
            norms_b.push(n);
            degen_b.push(degen);
        }
        v_states.push(states_b);
        norms.push(norms_b);
        degenerate.push(degen_b);
    }
    (
        q,
        GsCache {
            input: basis.clone(),
            v_states,
            norms,
            degenerate,
        },
    )
}

/// Backward through [`gram_schmidt_fwd`]: `gq` holds the gradient of the
/// loss w.r.t. the orthonormalized maps.
pub fn gram_schmidt_bwd(cache: &GsCache, q: &Array3<f64>, gq: &Array3<f64>) -> Array3<f64> {
    let (nb, k, hw) = cache.input.dim();
    let mut gb = Array3::<f64>::zeros((nb, k, hw));
    for bi in 0..nb {
        // accumulated gradients w.r.t. each q_i (downstream + later steps)
        let mut gq_acc: Vec<Array1<f64>> = (0..k)
            .map(|i| gq.slice(ndarray::s![bi, i, ..]).to_owned())
            .collect();
        for i in (0..k).rev() {
            if cache.degenerate[bi][i] {
                continue;
            }
            let n = cache.norms[bi][i];
            let qi = q.slice(ndarray::s![bi, i, ..]);
            // q_i = v_i / n  →  gv = (gq − q·(q·gq)) / n
            let dot = qi.dot(&gq_acc[i]);
            let mut gv: Array1<f64> =
                gq_acc[i].iter().zip(qi.iter()).map(|(&g, &qv)| (g - qv * dot) / n).collect();
            // reverse the projection subtractions v' = v − (v·q_j) q_j
            for j in (0..i).rev() {
                let v_pre = &cache.v_states[bi][i][j];
                let qj = q.slice(ndarray::s![bi, j, ..]);
                let gd_q = gv.dot(&qj);
                let r = v_pre.dot(&qj);
                // ∂/∂q_j: −v (gv'·q_j) − (v·q_j) gv'
                for ((gqj, &vp), &gvv) in
                    gq_acc[j].iter_mut().zip(v_pre.iter()).zip(gv.iter())
                {
                    *gqj += -vp * gd_q - r * gvv;
                }
                // ∂/∂v: gv' − q_j (gv'·q_j)
                for (gvv, &qv) in gv.iter_mut().zip(qj.iter()) {
                    *gvv -= qv * gd_q;
                }
            }
            gb.slice_mut(ndarray::s![bi, i, ..]).assign(&gv);
        }
    }
    gb
}

// ---------------------------------------------------------------------------
// grad-check harness

/// Central-finite-difference gradient verification. `f` evaluates the
/// scalar loss at the given flat input; `analytic` is the gradient under
/// test. At most `max_coords` coordinates are probed (seed-selected);
/// coordinates for which `skip` returns true are excluded (e.g. ReLU
/// pre-activations at exactly zero). Returns the max relative error.
pub fn grad_check<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    max_coords: usize,
    seed: u64,
    skip: Option<&dyn Fn(usize) -> bool>,
) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(
        (1e-4..=1e-2).contains(&eps),
        "finite-difference step {} outside [1e-4, 1e-2]",
        eps
    );
    assert_eq!(x.len(), analytic.len());
    let mut coords: Vec<usize> = (0..x.len()).collect();
    if coords.len() > max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // partial Fisher–Yates: the first max_coords entries are a
        // uniform sample without replacement
        for i in 0..max_coords {
            let j = rng.gen_range(i..coords.len());
            coords.swap(i, j);
        }
        coords.truncate(max_coords);
    }
    let mut buf = x.to_vec();
    let mut worst = 0.0f64;
    for &c in &coords {
        if let Some(pred) = skip {
            if pred(c) {
                continue;
            }
        }
        let orig = buf[c];
        buf[c] = orig + eps;
        let fp = f(&buf);
        buf[c] = orig - eps;
        let fm = f(&buf);
        buf[c] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let denom = fd.abs().max(analytic[c].abs()).max(1.0);
        let err = (fd - analytic[c]).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// network configuration and modules

/// Hyperparameters of the restoration network.
#[derive(Debug, Clone)]
pub struct SarnetConfig {
    pub base_channels: usize,
    pub max_channels: usize,
    pub subspace_dim: usize,
    pub cam_reduction: usize,
    /// Kernel size of the full-resolution stem block; deeper blocks use 1.
    pub stem_kernel: usize,
}

impl Default for SarnetConfig {
    fn default() -> Self {
        SarnetConfig {
            base_channels: 16,
            max_channels: 64,
            subspace_dim: 4,
            cam_reduction: 4,
            stem_kernel: 3,
        }
    }
}

impl SarnetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < self.subspace_dim {
            return Err(Error::InvalidArgument(format!(
                "base_channels {} < subspace_dim {}",
                self.base_channels, self.subspace_dim
            )));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::InvalidArgument("stem kernel must be odd".into()));
        }
        for s in 0..5 {
            let c = self.width(s);
            if s > 0 && self.cat_width(s - 1) % self.cam_reduction != 0 {
                return Err(Error::InvalidArgument(format!(
                    "decoder concat width {} not divisible by reduction {}",
                    self.cat_width(s - 1),
                    self.cam_reduction
                )));
            }
            if c == 0 {
                return Err(Error::InvalidArgument("zero channel width".into()));
            }
        }
        Ok(())
    }

    /// Channel width of scale `s` (0-based): doubles from the base and
    /// saturates at `max_channels`.
    pub fn width(&self, s: usize) -> usize {
        (self.base_channels << s).min(self.max_channels)
    }

    /// Channels entering the decoder block at scale `s` (0-based):
    /// upsampled deeper features concatenated with the skip connection.
    pub fn cat_width(&self, s: usize) -> usize {
        self.width(s + 1) + self.width(s)
    }
}

struct Conv2dM {
    w: usize,
    b: Option<usize>,
}

impl Conv2dM {
    fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Conv2dM {
        let fan_in = cin * k * k;
        let w = ps.add(
            &format!("{}.w", name),
            init_uniform(rng, &[cout, cin, k, k], fan_in),
            true,
        );
        let b = if bias {
            Some(ps.add(
                &format!("{}.b", name),
                init_uniform(rng, &[cout], fan_in),
                true,
            ))
        } else {
            None
        };
        Conv2dM { w, b }
    }

    fn weight<'a>(&self, ps: &'a ParamSet) -> Array4<f64> {
        ps.get(self.w)
            .data
            .clone()
            .into_dimensionality()
            .expect("conv weight rank")
    }

    fn bias(&self, ps: &ParamSet) -> Option<Array1<f64>> {
        self.b.map(|i| {
            ps.get(i)
                .data
                .clone()
                .into_dimensionality()
                .expect("conv bias rank")
        })
    }

    fn fwd(&self, ps: &ParamSet, x: &Array4<f64>) -> Result<Array4<f64>> {
        conv2d_fwd(x, &self.weight(ps), self.bias(ps).as_ref())
    }

    fn bwd(&self, ps: &mut ParamSet, x: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
        let w = self.weight(ps);
        let (gx, gw, gb) = conv2d_bwd(x, &w, gy);
        for (g, &v) in ps.get_mut(self.w).grad.iter_mut().zip(gw.iter()) {
            *g += v;
        }
        if let Some(bi) = self.b {
            for (g, &v) in ps.get_mut(bi).grad.iter_mut().zip(gb.iter()) {
                *g += v;
            }
        }
        gx
    }
}

struct BatchNormM {
    gamma: usize,
    beta: usize,
    rmean: usize,
    rvar: usize,
}

impl BatchNormM {
    fn new(ps: &mut ParamSet, name: &str, c: usize) -> BatchNormM {
        BatchNormM {
            gamma: ps.add(&format!("{}.gamma", name), ArrayD::ones(IxDyn(&[c])), true),
            beta: ps.add(&format!("{}.beta", name), ArrayD::zeros(IxDyn(&[c])), true),
            rmean: ps.add(
                &format!("{}.running_mean", name),
                ArrayD::zeros(IxDyn(&[c])),
                false,
            ),
            rvar: ps.add(
                &format!("{}.running_var", name),
                ArrayD::ones(IxDyn(&[c])),
                false,
            ),
        }
    }

    fn vec(&self, ps: &ParamSet, idx: usize) -> Array1<f64> {
        ps.get(idx)
            .data
            .clone()
            .into_dimensionality()
            .expect("bn rank")
    }

    fn fwd(
        &self,
        ps: &mut ParamSet,
        x: &Array4<f64>,
        training: bool,
    ) -> Result<(Array4<f64>, BnCache)> {
        let gamma = self.vec(ps, self.gamma);
        let beta = self.vec(ps, self.beta);
        let mut rm = self.vec(ps, self.rmean);
        let mut rv = self.vec(ps, self.rvar);
        let out = batchnorm2d_fwd(x, &gamma, &beta, &mut rm, &mut rv, training)?;
        ps.get_mut(self.rmean).data.assign(&rm.into_dyn());
        ps.get_mut(self.rvar).data.assign(&rv.into_dyn());
        Ok(out)
    }

    fn bwd(&self, ps: &mut ParamSet, cache: &BnCache, gy: &Array4<f64>) -> Array4<f64> {
        let gamma = self.vec(ps, self.gamma);
        let (gx, gg, gb) = batchnorm2d_bwd(cache, &gamma, gy);
        for (g, &v) in ps.get_mut(self.gamma).grad.iter_mut().zip(gg.iter()) {
            *g += v;
        }
        for (g, &v) in ps.get_mut(self.beta).grad.iter_mut().zip(gb.iter()) {
            *g += v;
        }
        gx
    }
}

/// Convolution + batch norm + ReLU.
struct ConvBlockM {
    conv: Conv2dM,
    bn: BatchNormM,
}

struct ConvBlockCache {
    x: Array4<f64>,
    bn: BnCache,
    pre_relu: Array4<f64>,
}

impl ConvBlockM {
    fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> ConvBlockM {
        ConvBlockM {
            conv: Conv2dM::new(ps, rng, &format!("{}.conv", name), cin, cout, k, true),
            bn: BatchNormM::new(ps, &format!("{}.bn", name), cout),
        }
    }

    fn fwd(
        &self,
        ps: &mut ParamSet,
        x: &Array4<f64>,
        training: bool,
    ) -> Result<(Array4<f64>, ConvBlockCache)> {
        let pre_bn = self.conv.fwd(ps, x)?;
        let (pre_relu, bn) = self.bn.fwd(ps, &pre_bn, training)?;
        let y = relu_fwd(&pre_relu);
        Ok((
            y,
            ConvBlockCache {
                x: x.clone(),
                bn,
                pre_relu,
            },
        ))
    }

    fn bwd(&self, ps: &mut ParamSet, cache: &ConvBlockCache, gy: &Array4<f64>) -> Array4<f64> {
        let g = relu_bwd(&cache.pre_relu, gy);
        let g = self.bn.bwd(ps, &cache.bn, &g);
        self.conv.bwd(ps, &cache.x, &g)
    }
}

/// Subspace-attention fusion: amplitude and phase band features plus the
/// downsampled upper-branch features are embedded, a learned basis is
/// orthonormalized over space, and the three projections are blended by
/// softmax attention before reconstruction. All convolutions here are
/// 1x1 and bias-free so that zero inputs map to zero.
struct SafmM {
    w_amp: Conv2dM,
    w_phase: Conv2dM,
    w_upper: Conv2dM,
    w_basis: Conv2dM,
    attn: usize,
    w_res: Conv2dM,
    c: usize,
    k: usize,
}

struct SafmCache {
    amp: Array4<f64>,
    phase: Array4<f64>,
    upper: Array4<f64>,
    e_amp: Array4<f64>,
    e_phase: Array4<f64>,
    e_upper: Array4<f64>,
    cat_embed: Array4<f64>,
    cat_raw: Array4<f64>,
    gs: GsCache,
    q: Array3<f64>,
    /// (batch, 3, c, k) projection coefficients
    proj: ndarray::Array4<f64>,
    attn_soft: Array2<f64>,
}

impl SafmM {
    fn new(
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_upper: usize,
        c: usize,
        k: usize,
    ) -> SafmM {
        SafmM {
            w_amp: Conv2dM::new(ps, rng, &format!("{}.amp", name), 3, c, 1, false),
            w_phase: Conv2dM::new(ps, rng, &format!("{}.phase", name), 3, c, 1, false),
            w_upper: Conv2dM::new(ps, rng, &format!("{}.upper", name), c_upper, c, 1, false),
            w_basis: Conv2dM::new(ps, rng, &format!("{}.basis", name), 3 * c, k, 1, false),
            attn: ps.add(
                &format!("{}.attn", name),
                ArrayD::zeros(IxDyn(&[3, k])),
                true,
            ),
            w_res: Conv2dM::new(
                ps,
                rng,
                &format!("{}.res", name),
                6 + c_upper,
                c,
                1,
                false,
            ),
            c,
            k,
        }
    }

    fn fwd(
        &self,
        ps: &ParamSet,
        amp: &Array4<f64>,
        phase: &Array4<f64>,
        upper: &Array4<f64>,
    ) -> Result<(Array4<f64>, SafmCache)> {
        let (nb, _, h, w) = amp.dim();
        if phase.dim() != amp.dim() || upper.dim().2 != h || upper.dim().3 != w {
            return Err(Error::ShapeMismatch(
                "fusion inputs must share one spatial size".into(),
            ));
        }
        let hw = h * w;
        let e_amp = self.w_amp.fwd(ps, amp)?;
        let e_phase = self.w_phase.fwd(ps, phase)?;
        let e_upper = self.w_upper.fwd(ps, upper)?;
        let cat_embed = concat_channels(&[&e_amp, &e_phase, &e_upper]);
        let basis_maps = self.w_basis.fwd(ps, &cat_embed)?;
        let basis_flat = basis_maps
            .to_shape((nb, self.k, hw))
            .expect("flatten basis")
            .to_owned();
        let (q, gs) = gram_schmidt_fwd(&basis_flat);
        // project each embedded feature set onto the basis
        let feats = [&e_amp, &e_phase, &e_upper];
        let mut proj = ndarray::Array4::<f64>::zeros((nb, 3, self.c, self.k));
        for bi in 0..nb {
            for (si, f) in feats.iter().enumerate() {
                let ff = f
                    .slice(ndarray::s![bi, .., .., ..])
                    .to_shape((self.c, hw))
                    .expect("flatten feat")
                    .to_owned();
                for c in 0..self.c {
                    for kk in 0..self.k {
                        proj[(bi, si, c, kk)] =
                            ff.row(c).dot(&q.slice(ndarray::s![bi, kk, ..]));
                    }
                }
            }
        }
        let attn_soft = softmax_cols_fwd(
            &ps.get(self.attn)
                .data
                .clone()
                .into_dimensionality()
                .expect("attn rank"),
        );
        // blend and reconstruct through the basis
        let mut y = Array4::<f64>::zeros((nb, self.c, h, w));
        for bi in 0..nb {
            for c in 0..self.c {
                for kk in 0..self.k {
                    let mut comb = 0.0;
                    for si in 0..3 {
                        comb += attn_soft[(si, kk)] * proj[(bi, si, c, kk)];
                    }
                    if comb == 0.0 {
                        continue;
                    }
                    for i in 0..h {
                        for j in 0..w {
                            y[(bi, c, i, j)] += comb * q[(bi, kk, i * w + j)];
                        }
                    }
                }
            }
        }
        let cat_raw = concat_channels(&[amp, phase, upper]);
        let res = self.w_res.fwd(ps, &cat_raw)?;
        y += &res;
        Ok((
            y,
            SafmCache {
                amp: amp.clone(),
                phase: phase.clone(),
                upper: upper.clone(),
                e_amp,
                e_phase,
                e_upper,
                cat_embed,
                cat_raw,
                gs,
                q,
                proj,
                attn_soft,
            },
        ))
    }

    fn bwd(
        &self,
        ps: &mut ParamSet,
        cache: &SafmCache,
        gy: &Array4<f64>,
    ) -> (Array4<f64>, Array4<f64>, Array4<f64>) {
        let (nb, _, h, w) = gy.dim();
        let hw = h * w;
        // residual path
        let g_cat_raw = self.w_res.bwd(ps, &cache.cat_raw, gy);
        let c_upper = cache.upper.dim().1;
        let raw_parts = split_channels(&g_cat_raw, &[3, 3, c_upper]);

        // reconstruction path
        let mut g_comb = Array3::<f64>::zeros((nb, self.c, self.k));
        let mut gq = Array3::<f64>::zeros((nb, self.k, hw));
        for bi in 0..nb {
            for c in 0..self.c {
                for kk in 0..self.k {
                    let mut comb = 0.0;
                    for si in 0..3 {
                        comb += cache.attn_soft[(si, kk)] * cache.proj[(bi, si, c, kk)];
                    }
                    let mut acc = 0.0;
                    for i in 0..h {
                        for j in 0..w {
                            let g = gy[(bi, c, i, j)];
                            acc += g * cache.q[(bi, kk, i * w + j)];
                            gq[(bi, kk, i * w + j)] += comb * g;
                        }
                    }
                    g_comb[(bi, c, kk)] = acc;
                }
            }
        }
        // attention weights and projection coefficients
        let mut g_attn_soft = Array2::<f64>::zeros((3, self.k));
        let mut g_proj = ndarray::Array4::<f64>::zeros(cache.proj.raw_dim());
        for bi in 0..nb {
            for c in 0..self.c {
                for kk in 0..self.k {
                    let g = g_comb[(bi, c, kk)];
                    for si in 0..3 {
                        g_attn_soft[(si, kk)] += g * cache.proj[(bi, si, c, kk)];
                        g_proj[(bi, si, c, kk)] = g * cache.attn_soft[(si, kk)];
                    }
                }
            }
        }
        let g_attn = softmax_cols_bwd(&cache.attn_soft, &g_attn_soft);
        for (g, &v) in ps.get_mut(self.attn).grad.iter_mut().zip(g_attn.iter()) {
            *g += v;
        }
        // projections: proj = feat · q
        let feats = [&cache.e_amp, &cache.e_phase, &cache.e_upper];
        let mut g_feats = vec![Array4::<f64>::zeros(cache.e_amp.raw_dim()); 3];
        for bi in 0..nb {
            for (si, f) in feats.iter().enumerate() {
                for c in 0..self.c {
                    for kk in 0..self.k {
                        let g = g_proj[(bi, si, c, kk)];
                        if g == 0.0 {
                            continue;
                        }
                        for i in 0..h {
                            for j in 0..w {
                                g_feats[si][(bi, c, i, j)] += g * cache.q[(bi, kk, i * w + j)];
                                gq[(bi, kk, i * w + j)] += g * f[(bi, c, i, j)];
                            }
                        }
                    }
                }
            }
        }
        // through the orthonormalization into the basis convolution
        let g_basis_flat = gram_schmidt_bwd(&cache.gs, &cache.q, &gq);
        let g_basis = g_basis_flat
            .to_shape((nb, self.k, h, w))
            .expect("unflatten basis grad")
            .to_owned();
        let g_cat_embed_from_basis = self.w_basis.bwd(ps, &cache.cat_embed, &g_basis);
        let embed_parts = split_channels(&g_cat_embed_from_basis, &[self.c, self.c, self.c]);

        let g_e_amp = &g_feats[0] + &embed_parts[0];
        let g_e_phase = &g_feats[1] + &embed_parts[1];
        let g_e_upper = &g_feats[2] + &embed_parts[2];
        let g_amp = self.w_amp.bwd(ps, &cache.amp, &g_e_amp) + &raw_parts[0];
        let g_phase = self.w_phase.bwd(ps, &cache.phase, &g_e_phase) + &raw_parts[1];
        let g_upper = self.w_upper.bwd(ps, &cache.upper, &g_e_upper) + &raw_parts[2];
        (g_amp, g_phase, g_upper)
    }
}

/// Channel attention: squeeze (global average pool), a two-layer 1x1
/// bottleneck with ReLU, sigmoid gates, and channel-wise re-weighting.
struct CamM {
    c1: Conv2dM,
    c2: Conv2dM,
}

struct CamCache {
    x: Array4<f64>,
    pooled: Array4<f64>,
    pre_relu: Array4<f64>,
    hidden: Array4<f64>,
    gates: Array4<f64>,
}

impl CamM {
    fn new(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, c: usize, reduction: usize) -> CamM {
        CamM {
            c1: Conv2dM::new(ps, rng, &format!("{}.fc1", name), c, c / reduction, 1, true),
            c2: Conv2dM::new(ps, rng, &format!("{}.fc2", name), c / reduction, c, 1, true),
        }
    }

    fn fwd(&self, ps: &ParamSet, x: &Array4<f64>) -> Result<(Array4<f64>, CamCache)> {
        let (nb, c, h, w) = x.dim();
        let mut pooled = Array4::<f64>::zeros((nb, c, 1, 1));
        let inv = 1.0 / (h * w) as f64;
        for bi in 0..nb {
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        s += x[(bi, ch, i, j)];
                    }
                }
                pooled[(bi, ch, 0, 0)] = s * inv;
            }
        }
        let pre_relu = self.c1.fwd(ps, &pooled)?;
        let hidden = relu_fwd(&pre_relu);
        let logits = self.c2.fwd(ps, &hidden)?;
        let gates = sigmoid_fwd(&logits);
        let mut y = x.clone();
        for bi in 0..nb {
            for ch in 0..c {
                let g = gates[(bi, ch, 0, 0)];
                for i in 0..h {
                    for j in 0..w {
                        y[(bi, ch, i, j)] *= g;
                    }
                }
            }
        }
        Ok((
            y,
            CamCache {
                x: x.clone(),
                pooled,
                pre_relu,
                hidden,
                gates,
            },
        ))
    }

    fn bwd(&self, ps: &mut ParamSet, cache: &CamCache, gy: &Array4<f64>) -> Array4<f64> {
        let (nb, c, h, w) = gy.dim();
        let mut gx = Array4::<f64>::zeros(gy.raw_dim());
        let mut g_gates = Array4::<f64>::zeros((nb, c, 1, 1));
        for bi in 0..nb {
            for ch in 0..c {
                let g = cache.gates[(bi, ch, 0, 0)];
                let mut acc = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        gx[(bi, ch, i, j)] = gy[(bi, ch, i, j)] * g;
                        acc += gy[(bi, ch, i, j)] * cache.x[(bi, ch, i, j)];
                    }
                }
                g_gates[(bi, ch, 0, 0)] = acc;
            }
        }
        let g_logits = sigmoid_bwd(&cache.gates, &g_gates);
        let g_hidden = self.c2.bwd(ps, &cache.hidden, &g_logits);
        let g_pre = relu_bwd(&cache.pre_relu, &g_hidden);
        let g_pooled = self.c1.bwd(ps, &cache.pooled, &g_pre);
        let inv = 1.0 / (h * w) as f64;
        for bi in 0..nb {
            for ch in 0..c {
                let g = g_pooled[(bi, ch, 0, 0)] * inv;
                for i in 0..h {
                    for j in 0..w {
                        gx[(bi, ch, i, j)] += g;
                    }
                }
            }
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// the network

/// Five-branch restoration network: a full-resolution stem on the
/// Time-max image, four subspace-attention fusion branches fed by the
/// band-image triplets at halved resolutions, and a skip-connected
/// decoder with channel attention.
pub struct Sarnet {
    pub cfg: SarnetConfig,
    pub params: ParamSet,
    stem: ConvBlockM,
    branches: Vec<(SafmM, ConvBlockM)>,
    decoder: Vec<(CamM, ConvBlockM)>,
    head: Conv2dM,
}

/// Batched network inputs: the Time-max map plus per-branch band
/// triplets, downsampled to each branch's resolution.
pub struct SarnetInputs {
    pub timemax: Array4<f64>,
    pub amp: Vec<Array4<f64>>,
    pub phase: Vec<Array4<f64>>,
}

pub struct SarnetCache {
    stem: ConvBlockCache,
    enc: Vec<(SafmCache, ConvBlockCache)>,
    enc_out: Vec<Array4<f64>>,
    dec: Vec<(Array4<f64>, CamCache, ConvBlockCache)>,
    head_in: Array4<f64>,
    head_out: Array4<f64>,
}

impl Sarnet {
    pub fn new(cfg: SarnetConfig, seed: u64) -> Result<Sarnet> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = ConvBlockM::new(&mut ps, &mut rng, "stem", 1, cfg.width(0), cfg.stem_kernel);
        let mut branches = Vec::new();
        for s in 1..5 {
            let safm = SafmM::new(
                &mut ps,
                &mut rng,
                &format!("enc{}.safm", s),
                cfg.width(s - 1),
                cfg.width(s),
                cfg.subspace_dim,
            );
            let cb = ConvBlockM::new(
                &mut ps,
                &mut rng,
                &format!("enc{}.block", s),
                cfg.width(s),
                cfg.width(s),
                1,
            );
            branches.push((safm, cb));
        }
        let mut decoder = Vec::new();
        for s in (0..4).rev() {
            let cat = cfg.cat_width(s);
            let cam = CamM::new(&mut ps, &mut rng, &format!("dec{}.cam", s), cat, cfg.cam_reduction);
            let cb = ConvBlockM::new(
                &mut ps,
                &mut rng,
                &format!("dec{}.block", s),
                cat,
                cfg.width(s),
                1,
            );
            decoder.push((cam, cb));
        }
        let head = Conv2dM::new(&mut ps, &mut rng, "head", cfg.width(0), 1, 1, true);
        Ok(Sarnet {
            cfg,
            params: ps,
            stem,
            branches,
            decoder,
            head,
        })
    }

    /// Forward pass; returns the restored map in [0, 1] and the cache
    /// needed for the backward pass.
    pub fn forward(
        &mut self,
        inputs: &SarnetInputs,
        training: bool,
    ) -> Result<(Array4<f64>, SarnetCache)> {
        let (_, _, h, w) = inputs.timemax.dim();
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::ShapeMismatch(format!(
                "spatial size {}x{} not divisible by 16",
                h, w
            )));
        }
        let ps = &mut self.params;
        let (e0, stem_cache) = self.stem.fwd(ps, &inputs.timemax, training)?;
        let mut enc_out = vec![e0];
        let mut enc = Vec::new();
        for s in 1..5 {
            let upper = downsample_half_fwd(&enc_out[s - 1])?;
            let (safm, cb) = &self.branches[s - 1];
            let (fused, safm_cache) =
                safm.fwd(ps, &inputs.amp[s - 1], &inputs.phase[s - 1], &upper)?;
            let (out, cb_cache) = cb.fwd(ps, &fused, training)?;
            enc.push((safm_cache, cb_cache));
            enc_out.push(out);
        }
        // decoder from the coarsest scale upward
        let mut d = enc_out[4].clone();
        let mut dec = Vec::new();
        for (di, s) in (0..4).rev().enumerate() {
            let up = upsample_double_fwd(&d);
            let cat = concat_channels(&[&up, &enc_out[s]]);
            let (cam, cb) = &self.decoder[di];
            let (gated, cam_cache) = cam.fwd(ps, &cat)?;
            let (out, cb_cache) = cb.fwd(ps, &gated, training)?;
            dec.push((cat, cam_cache, cb_cache));
            d = out;
        }
        let head_in = d;
        let logits = self.head.fwd(ps, &head_in)?;
        let head_out = sigmoid_fwd(&logits);
        Ok((
            head_out.clone(),
            SarnetCache {
                stem: stem_cache,
                enc,
                enc_out,
                dec,
                head_in,
                head_out,
            },
        ))
    }

    /// Backward pass accumulating parameter gradients.
    pub fn backward(&mut self, cache: &SarnetCache, gy: &Array4<f64>) {
        let ps = &mut self.params;
        let g_logits = sigmoid_bwd(&cache.head_out, gy);
        let mut g_d = self.head.bwd(ps, &cache.head_in, &g_logits);
        // gradients flowing into each encoder output
        let mut g_enc: Vec<Array4<f64>> = cache
            .enc_out
            .iter()
            .map(|e| Array4::zeros(e.raw_dim()))
            .collect();
        for (di, s) in (0..4).rev().enumerate().rev() {
            let (cat, cam_cache, cb_cache) = &cache.dec[di];
            let (cam, cb) = &self.decoder[di];
            let g_gated = cb.bwd(ps, cb_cache, &g_d);
            let g_cat = cam.bwd(ps, cam_cache, &g_gated);
            let deep_c = cat.dim().1 - cache.enc_out[s].dim().1;
            let parts = split_channels(&g_cat, &[deep_c, cache.enc_out[s].dim().1]);
            g_enc[s] += &parts[1];
            g_d = upsample_double_bwd(&parts[0]);
        }
        g_enc[4] += &g_d;
        // encoder branches, coarsest first so upper-feature gradients
        // propagate into shallower scales
        for s in (1..5).rev() {
            let (safm_cache, cb_cache) = &cache.enc[s - 1];
            let (safm, cb) = &self.branches[s - 1];
            let g_fused = cb.bwd(ps, cb_cache, &g_enc[s]);
            let (_g_amp, _g_phase, g_upper) = safm.bwd(ps, safm_cache, &g_fused);
            g_enc[s - 1] += &downsample_half_bwd(&g_upper);
        }
        self.stem.bwd(ps, &cache.stem, &g_enc[0]);
    }

    /// The orthonormal basis maps of every fusion branch from the most
    /// recent forward pass, for invariant checks.
    pub fn fusion_bases(cache: &SarnetCache) -> Vec<&Array3<f64>> {
        cache.enc.iter().map(|(s, _)| &s.q).collect()
    }

    /// Closed-form trainable parameter count for a configuration.
    pub fn expected_param_count(cfg: &SarnetConfig) -> usize {
        let conv = |cin: usize, cout: usize, k: usize, bias: bool| {
            cout * cin * k * k + if bias { cout } else { 0 }
        };
        let block = |cin: usize, cout: usize, k: usize| conv(cin, cout, k, true) + 2 * cout;
        let mut total = block(1, cfg.width(0), cfg.stem_kernel);
        for s in 1..5 {
            let (cu, c, k) = (cfg.width(s - 1), cfg.width(s), cfg.subspace_dim);
            total += conv(3, c, 1, false) * 2
                + conv(cu, c, 1, false)
                + conv(3 * c, k, 1, false)
                + 3 * k
                + conv(6 + cu, c, 1, false)
                + block(c, c, 1);
        }
        for s in 0..4 {
            let cat = cfg.cat_width(s);
            total += conv(cat, cat / cfg.cam_reduction, 1, true)
                + conv(cat / cfg.cam_reduction, cat, 1, true)
                + block(cat, cfg.width(s), 1);
        }
        total + conv(cfg.width(0), 1, 1, true)
    }
}

/// Build batched network inputs from feature stacks: channel 0 is the
/// Time-max map; the twelve amplitude and twelve phase channels are
/// split into ascending-frequency triplets and average-pooled to the
/// resolution of their branch.
pub fn prepare_inputs(stacks: &[&FeatureStack]) -> Result<SarnetInputs> {
    if stacks.is_empty() {
        return Err(Error::InvalidArgument("no input stacks".into()));
    }
    let (ch, h, w) = stacks[0].channels.dim();
    if ch != crate::spectral::FEATURE_CHANNELS {
        return Err(Error::ShapeMismatch(format!(
            "expected {} feature channels, got {}",
            crate::spectral::FEATURE_CHANNELS,
            ch
        )));
    }
    let nb = stacks.len();
    let mut timemax = Array4::<f64>::zeros((nb, 1, h, w));
    for (bi, st) in stacks.iter().enumerate() {
        if st.channels.dim() != (ch, h, w) {
            return Err(Error::ShapeMismatch("stacks must share one shape".into()));
        }
        for i in 0..h {
            for j in 0..w {
                timemax[(bi, 0, i, j)] = st.channels[(0, i, j)] as f64;
            }
        }
    }
    let mut amp = Vec::with_capacity(4);
    let mut phase = Vec::with_capacity(4);
    for b in 0..4 {
        let mut a = Array4::<f64>::zeros((nb, 3, h, w));
        let mut p = Array4::<f64>::zeros((nb, 3, h, w));
        for (bi, st) in stacks.iter().enumerate() {
            for t in 0..3 {
                let band = 3 * b + t;
                for i in 0..h {
                    for j in 0..w {
                        a[(bi, t, i, j)] = st.channels[(1 + band, i, j)] as f64;
                        p[(bi, t, i, j)] = st.channels[(13 + band, i, j)] as f64;
                    }
                }
            }
        }
        // branch b+1 runs at 1/2^(b+1) of full resolution
        for _ in 0..=b {
            a = downsample_half_fwd(&a)?;
            p = downsample_half_fwd(&p)?;
        }
        amp.push(a);
        phase.push(p);
    }
    Ok(SarnetInputs {
        timemax,
        amp,
        phase,
    })
}

/// Run the network in eval mode on one feature stack.
pub fn sarnet_forward(net: &mut Sarnet, bands: &FeatureStack) -> Result<Image2D> {
    let inputs = prepare_inputs(&[bands])?;
    let (y, _) = net.forward(&inputs, false)?;
    let (_, _, h, w) = y.dim();
    let mut out = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            out[(i, j)] = y[(0, 0, i, j)] as f32;
        }
    }
    Image2D::new(out, bands.pitch_mm)
}

/// Training options for [`train`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop early once the epoch loss drops to this value.
    pub stop_at_loss: Option<f64>,
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            stop_at_loss: None,
        }
    }
}

/// Full-batch Adam training against mean-squared error on the target
/// maps. Returns the per-epoch loss history.
pub fn train(
    net: &mut Sarnet,
    dataset: &[(&FeatureStack, &Image2D)],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let stacks: Vec<&FeatureStack> = dataset.iter().map(|(s, _)| *s).collect();
    let inputs = prepare_inputs(&stacks)?;
    let (nb, _, h, w) = inputs.timemax.dim();
    let mut target = Array4::<f64>::zeros((nb, 1, h, w));
    for (bi, (_, img)) in dataset.iter().enumerate() {
        if img.height() != h || img.width() != w {
            return Err(Error::ShapeMismatch(
                "target size does not match feature stacks".into(),
            ));
        }
        for i in 0..h {
            for j in 0..w {
                target[(bi, 0, i, j)] = img.data[(i, j)] as f64;
            }
        }
    }
    let n = (nb * h * w) as f64;
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        net.params.zero_grad();
        let (y, cache) = net.forward(&inputs, true)?;
        let diff = &y - &target;
        let loss = diff.iter().map(|&d| d * d).sum::<f64>() / n;
        let gy = diff.mapv(|d| 2.0 * d / n);
        net.backward(&cache, &gy);
        net.params
            .adam_step(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        history.push(loss);
        if let Some(stop) = cfg.stop_at_loss {
            if loss <= stop {
                break;
            }
        }
    }
    Ok(history)
}
