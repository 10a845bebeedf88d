//! Minimal neural-network toolkit: flat parameter storage with a named
//! layout, conv/pool/linear/attention-pool kernels with hand-written
//! backward passes, sinusoidal step embeddings, and an Adam optimizer.
//!
//! Everything is generic over the scalar so the same network runs in f32
//! for training and in f64 for finite-difference gradient verification.
//! Layouts are channel-last: feature maps are `[h, w, c]` flattened
//! row-major, conv weights are `[c_out, k, k, c_in]`.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rand_util;
use crate::tensor::TensorF32;

pub trait Scalar:
    'static
    + Copy
    + Send
    + Sync
    + PartialOrd
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
}

impl Scalar for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
}

impl Scalar for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    fn from_f64(x: f64) -> f64 {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Ordinal of this parameter within its layout's entry list.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    /// Fan-in for the uniform init scale; zero-initialized when 0 (biases).
    pub fan_in: usize,
}

/// Named, flat parameter layout shared by a network's params and grads.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let len: usize = shape.iter().product();
        let entry = ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.total,
            len,
            fan_in,
        };
        self.total += len;
        self.entries.push(entry);
        ParamId(self.entries.len() - 1)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn view<'a, S>(&self, params: &'a [S], id: ParamId) -> &'a [S] {
        let e = &self.entries[id.0];
        &params[e.offset..e.offset + e.len]
    }

    /// Fan-in scaled uniform init. Draws are made in f64, rounded through
    /// f32, then widened to S, so f32 and f64 instantiations of the same
    /// seed share bit-equal parameter values.
    pub fn init_params<S: Scalar>(&self, seed: u64) -> Vec<S> {
        let mut rng = rand_util::rng_from_seed(seed);
        let mut params = vec![S::ZERO; self.total];
        for e in &self.entries {
            if e.fan_in == 0 {
                continue;
            }
            let bound = 1.0 / (e.fan_in as f64).sqrt();
            for v in &mut params[e.offset..e.offset + e.len] {
                let draw = rng.gen_range(-bound..bound) as f32;
                *v = S::from_f64(draw as f64);
            }
        }
        params
    }

    pub fn to_named_tensors<S: Scalar>(&self, params: &[S]) -> Vec<(String, TensorF32)> {
        self.entries
            .iter()
            .map(|e| {
                let data: Vec<f32> = params[e.offset..e.offset + e.len]
                    .iter()
                    .map(|v| v.to_f64() as f32)
                    .collect();
                (e.name.clone(), TensorF32::from_parts(e.shape.clone(), data))
            })
            .collect()
    }

    pub fn from_named_tensors<S: Scalar>(&self, entries: &[(String, TensorF32)]) -> Result<Vec<S>> {
        let mut params = vec![S::ZERO; self.total];
        for e in &self.entries {
            let tensor = entries
                .iter()
                .find(|(name, _)| name == &e.name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor `{}`", e.name)))?;
            if tensor.shape() != e.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: e.shape.clone(),
                    got: tensor.shape().to_vec(),
                });
            }
            for (dst, &src) in params[e.offset..e.offset + e.len].iter_mut().zip(tensor.data()) {
                *dst = S::from_f64(src as f64);
            }
        }
        Ok(params)
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// Same-padding stride-1 convolution; `k` must be odd.
pub fn conv2d<S: Scalar>(
    x: &[S],
    h: usize,
    w: usize,
    cin: usize,
    wgt: &[S],
    bias: &[S],
    cout: usize,
    k: usize,
    y: &mut [S],
) {
    let pad = k / 2;
    debug_assert_eq!(x.len(), h * w * cin);
    debug_assert_eq!(wgt.len(), cout * k * k * cin);
    debug_assert_eq!(y.len(), h * w * cout);
    for oy in 0..h {
        for ox in 0..w {
            let out = &mut y[(oy * w + ox) * cout..(oy * w + ox + 1) * cout];
            out.copy_from_slice(bias);
            for ky in 0..k {
                let iy = oy as i64 + ky as i64 - pad as i64;
                if iy < 0 || iy >= h as i64 {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as i64 + kx as i64 - pad as i64;
                    if ix < 0 || ix >= w as i64 {
                        continue;
                    }
                    let xoff = (iy as usize * w + ix as usize) * cin;
                    let xv = &x[xoff..xoff + cin];
                    for (co, o) in out.iter_mut().enumerate() {
                        let woff = ((co * k + ky) * k + kx) * cin;
                        let wv = &wgt[woff..woff + cin];
                        let mut acc = S::ZERO;
                        for ci in 0..cin {
                            acc += wv[ci] * xv[ci];
                        }
                        *o += acc;
                    }
                }
            }
        }
    }
}

/// Accumulating backward of `conv2d` into `dx`, `dwgt`, `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<S: Scalar>(
    x: &[S],
    h: usize,
    w: usize,
    cin: usize,
    wgt: &[S],
    cout: usize,
    k: usize,
    dy: &[S],
    dx: &mut [S],
    dwgt: &mut [S],
    dbias: &mut [S],
) {
    let pad = k / 2;
    for oy in 0..h {
        for ox in 0..w {
            let dyv = &dy[(oy * w + ox) * cout..(oy * w + ox + 1) * cout];
            for (co, &dv) in dyv.iter().enumerate() {
                dbias[co] += dv;
            }
            for ky in 0..k {
                let iy = oy as i64 + ky as i64 - pad as i64;
                if iy < 0 || iy >= h as i64 {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as i64 + kx as i64 - pad as i64;
                    if ix < 0 || ix >= w as i64 {
                        continue;
                    }
                    let xoff = (iy as usize * w + ix as usize) * cin;
                    for (co, &dv) in dyv.iter().enumerate() {
                        let woff = ((co * k + ky) * k + kx) * cin;
                        for ci in 0..cin {
                            dwgt[woff + ci] += dv * x[xoff + ci];
                            dx[xoff + ci] += dv * wgt[woff + ci];
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::ONE / (S::ONE + (-x).exp())
}

pub fn silu<S: Scalar>(x: &[S], y: &mut [S]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = v * sigmoid(v);
    }
}

/// `dx += silu'(x) * dy`, with `x` the pre-activation saved at forward time.
pub fn silu_bwd<S: Scalar>(x: &[S], dy: &[S], dx: &mut [S]) {
    for i in 0..x.len() {
        let s = sigmoid(x[i]);
        dx[i] += dy[i] * (s + x[i] * s * (S::ONE - s));
    }
}

/// 2x2 average pooling; `h`, `w` must be even.
pub fn avgpool2<S: Scalar>(x: &[S], h: usize, w: usize, c: usize, y: &mut [S]) {
    let quarter = S::from_f64(0.25);
    let (oh, ow) = (h / 2, w / 2);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = S::ZERO;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += x[((2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                    }
                }
                y[(oy * ow + ox) * c + ch] = acc * quarter;
            }
        }
    }
}

pub fn avgpool2_bwd<S: Scalar>(dy: &[S], h: usize, w: usize, c: usize, dx: &mut [S]) {
    let quarter = S::from_f64(0.25);
    let (oh, ow) = (h / 2, w / 2);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let g = dy[(oy * ow + ox) * c + ch] * quarter;
                for dyi in 0..2 {
                    for dxi in 0..2 {
                        dx[((2 * oy + dyi) * w + 2 * ox + dxi) * c + ch] += g;
                    }
                }
            }
        }
    }
}

/// 2x nearest-neighbor upsampling from `[h, w, c]` to `[2h, 2w, c]`.
pub fn upsample2<S: Scalar>(x: &[S], h: usize, w: usize, c: usize, y: &mut [S]) {
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let src = ((oy / 2) * w + ox / 2) * c;
            let dst = (oy * 2 * w + ox) * c;
            y[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
}

pub fn upsample2_bwd<S: Scalar>(dy: &[S], h: usize, w: usize, c: usize, dx: &mut [S]) {
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let src = ((oy / 2) * w + ox / 2) * c;
            let dst = (oy * 2 * w + ox) * c;
            for ch in 0..c {
                dx[src + ch] += dy[dst + ch];
            }
        }
    }
}

/// Dense layer `y = W x + b`, weights `[n_out, n_in]`.
pub fn linear<S: Scalar>(x: &[S], wgt: &[S], bias: &[S], n_out: usize, y: &mut [S]) {
    let n_in = x.len();
    for o in 0..n_out {
        let row = &wgt[o * n_in..(o + 1) * n_in];
        let mut acc = bias[o];
        for i in 0..n_in {
            acc += row[i] * x[i];
        }
        y[o] = acc;
    }
}

pub fn linear_bwd<S: Scalar>(
    x: &[S],
    wgt: &[S],
    n_out: usize,
    dy: &[S],
    dx: &mut [S],
    dwgt: &mut [S],
    dbias: &mut [S],
) {
    let n_in = x.len();
    for o in 0..n_out {
        let dv = dy[o];
        dbias[o] += dv;
        let row = &wgt[o * n_in..(o + 1) * n_in];
        let drow = &mut dwgt[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] += dv * x[i];
            dx[i] += dv * row[i];
        }
    }
}

/// Adds a per-channel bias over the spatial grid, in place.
pub fn add_channel_bias<S: Scalar>(feat: &mut [S], c: usize, bias: &[S]) {
    for chunk in feat.chunks_exact_mut(c) {
        for (v, &b) in chunk.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub fn add_channel_bias_bwd<S: Scalar>(dfeat: &[S], c: usize, dbias: &mut [S]) {
    for chunk in dfeat.chunks_exact(c) {
        for (db, &d) in dbias.iter_mut().zip(chunk) {
            *db += d;
        }
    }
}

/// Attention-style global pooling: per-position scores from a linear probe
/// of the features, softmax over positions, score-weighted feature sum.
/// Returns the softmax weights for the backward pass.
pub fn attention_pool<S: Scalar>(
    feat: &[S],
    positions: usize,
    c: usize,
    score_w: &[S],
    pooled: &mut [S],
) -> Vec<S> {
    let mut scores = vec![S::ZERO; positions];
    for p in 0..positions {
        let f = &feat[p * c..(p + 1) * c];
        // softmax is shift invariant, so a score bias would be a dead
        // parameter; the probe is purely linear
        let mut acc = S::ZERO;
        for ch in 0..c {
            acc += score_w[ch] * f[ch];
        }
        scores[p] = acc;
    }
    let mut max = scores[0];
    for &s in &scores[1..] {
        if s > max {
            max = s;
        }
    }
    let mut denom = S::ZERO;
    for s in &mut scores {
        *s = (*s - max).exp();
        denom += *s;
    }
    for s in &mut scores {
        *s = *s / denom;
    }
    for ch in 0..c {
        pooled[ch] = S::ZERO;
    }
    for p in 0..positions {
        let a = scores[p];
        let f = &feat[p * c..(p + 1) * c];
        for ch in 0..c {
            pooled[ch] += a * f[ch];
        }
    }
    scores
}

#[allow(clippy::too_many_arguments)]
pub fn attention_pool_bwd<S: Scalar>(
    feat: &[S],
    positions: usize,
    c: usize,
    score_w: &[S],
    weights: &[S],
    dpooled: &[S],
    dfeat: &mut [S],
    dscore_w: &mut [S],
) {
    // dalpha_p = <dpooled, feat_p>; dfeat += alpha_p * dpooled
    let mut dalpha = vec![S::ZERO; positions];
    for p in 0..positions {
        let f = &feat[p * c..(p + 1) * c];
        let df = &mut dfeat[p * c..(p + 1) * c];
        let mut acc = S::ZERO;
        for ch in 0..c {
            acc += dpooled[ch] * f[ch];
            df[ch] += weights[p] * dpooled[ch];
        }
        dalpha[p] = acc;
    }
    // softmax backward
    let mut inner = S::ZERO;
    for p in 0..positions {
        inner += weights[p] * dalpha[p];
    }
    for p in 0..positions {
        let dscore = weights[p] * (dalpha[p] - inner);
        let f = &feat[p * c..(p + 1) * c];
        let df = &mut dfeat[p * c..(p + 1) * c];
        for ch in 0..c {
            dscore_w[ch] += dscore * f[ch];
            df[ch] += dscore * score_w[ch];
        }
    }
}

/// Folds a latent context and a noisy latent future into one channel-last
/// feature map: frames are concatenated along the temporal axis, each frame
/// carries its `cz` channels plus a binary observation-indicator channel
/// (1 for context frames, 0 for noisy frames), and the temporal axis is
/// folded into channels. Output is `[hz, wz, (l_in + l_out) * (cz + 1)]`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_latents<S: Scalar>(
    z_t: &[S],
    z_cond: &[S],
    l_in: usize,
    l_out: usize,
    hz: usize,
    wz: usize,
    cz: usize,
) -> Vec<S> {
    debug_assert_eq!(z_t.len(), l_out * hz * wz * cz);
    debug_assert_eq!(z_cond.len(), l_in * hz * wz * cz);
    let per_frame = cz + 1;
    let cin = (l_in + l_out) * per_frame;
    let mut x0 = vec![S::ZERO; hz * wz * cin];
    for f in 0..l_in + l_out {
        let (src, is_cond, fi) = if f < l_in {
            (z_cond, true, f)
        } else {
            (z_t, false, f - l_in)
        };
        for y in 0..hz {
            for x in 0..wz {
                let dst = (y * wz + x) * cin + f * per_frame;
                let src_off = ((fi * hz + y) * wz + x) * cz;
                for c in 0..cz {
                    x0[dst + c] = src[src_off + c];
                }
                x0[dst + cz] = if is_cond { S::ONE } else { S::ZERO };
            }
        }
    }
    x0
}

/// Extracts the gradient slots of the noisy frames from a gradient on the
/// assembled map; inverse indexing of `assemble_latents` restricted to the
/// `z_t` block.
#[allow(clippy::too_many_arguments)]
pub fn disassemble_zt_grad<S: Scalar>(
    dx0: &[S],
    l_in: usize,
    l_out: usize,
    hz: usize,
    wz: usize,
    cz: usize,
) -> Vec<S> {
    let per_frame = cz + 1;
    let cin = (l_in + l_out) * per_frame;
    let mut dz = vec![S::ZERO; l_out * hz * wz * cz];
    for fi in 0..l_out {
        let f = l_in + fi;
        for y in 0..hz {
            for x in 0..wz {
                let src = (y * wz + x) * cin + f * per_frame;
                let dst = ((fi * hz + y) * wz + x) * cz;
                for c in 0..cz {
                    dz[dst + c] = dx0[src + c];
                }
            }
        }
    }
    dz
}

/// Sinusoidal embedding of an integer step index.
pub fn sinusoidal_embedding<S: Scalar>(t: usize, dim: usize) -> Vec<S> {
    let half = dim / 2;
    let mut emb = vec![S::ZERO; dim];
    for i in 0..half {
        let freq = (-(10_000.0f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        emb[2 * i] = S::from_f64(arg.sin());
        emb[2 * i + 1] = S::from_f64(arg.cos());
    }
    emb
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; zero by default.
    pub weight_decay: f64,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: None,
        }
    }
}

/// Adam state; moments are kept in f64 regardless of the parameter scalar.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update. Gradients must be finite; an optional global-norm
    /// clip rescales them first.
    pub fn step<S: Scalar>(&mut self, params: &mut [S], grads: &[S], cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract("optimizer state size mismatch"));
        }
        if !(cfg.lr >= 0.0) {
            return Err(Error::contract("lr must be >= 0"));
        }
        let mut norm_sq = 0.0f64;
        for g in grads {
            let g = g.to_f64();
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
            norm_sq += g * g;
        }
        let scale = match cfg.grad_clip {
            Some(clip) if norm_sq.sqrt() > clip => clip / norm_sq.sqrt(),
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i].to_f64() * scale;
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let p = params[i].to_f64();
            let update = cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p);
            params[i] = S::from_f64(p - update);
        }
        Ok(())
    }
}

/// Central finite differences of a scalar function, for gradient checks.
pub fn finite_difference_gradient<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest relative error between an analytic gradient and its central
/// finite-difference estimate, with an absolute floor for near-zero entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn randvec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rand_util::rng_from_seed(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv2d_gradcheck() {
        let (h, w, cin, cout, k) = (4, 5, 3, 2, 3);
        let x = randvec(h * w * cin, 1);
        let wgt = randvec(cout * k * k * cin, 2);
        let bias = randvec(cout, 3);
        // scalar objective: weighted sum of outputs
        let probe = randvec(h * w * cout, 4);
        let fwd = |x: &[f64], wgt: &[f64], bias: &[f64]| -> f64 {
            let mut y = vec![0.0; h * w * cout];
            conv2d(x, h, w, cin, wgt, bias, cout, k, &mut y);
            y.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let mut dx = vec![0.0; x.len()];
        let mut dwgt = vec![0.0; wgt.len()];
        let mut dbias = vec![0.0; bias.len()];
        conv2d_bwd(&x, h, w, cin, &wgt, cout, k, &probe, &mut dx, &mut dwgt, &mut dbias);

        let num_dx = finite_difference_gradient(|p| fwd(p, &wgt, &bias), &x, 1e-6);
        let num_dw = finite_difference_gradient(|p| fwd(&x, p, &bias), &wgt, 1e-6);
        let num_db = finite_difference_gradient(|p| fwd(&x, &wgt, p), &bias, 1e-6);
        assert!(max_relative_error(&dx, &num_dx, 1e-8) < 1e-6);
        assert!(max_relative_error(&dwgt, &num_dw, 1e-8) < 1e-6);
        assert!(max_relative_error(&dbias, &num_db, 1e-8) < 1e-6);
    }

    #[test]
    fn conv1x1_gradcheck() {
        let (h, w, cin, cout, k) = (3, 3, 4, 5, 1);
        let x = randvec(h * w * cin, 5);
        let wgt = randvec(cout * cin, 6);
        let bias = randvec(cout, 7);
        let probe = randvec(h * w * cout, 8);
        let mut dx = vec![0.0; x.len()];
        let mut dwgt = vec![0.0; wgt.len()];
        let mut dbias = vec![0.0; bias.len()];
        conv2d_bwd(&x, h, w, cin, &wgt, cout, k, &probe, &mut dx, &mut dwgt, &mut dbias);
        let num_dx = finite_difference_gradient(
            |p| {
                let mut y = vec![0.0; h * w * cout];
                conv2d(p, h, w, cin, &wgt, &bias, cout, k, &mut y);
                y.iter().zip(&probe).map(|(a, b)| a * b).sum()
            },
            &x,
            1e-6,
        );
        assert!(max_relative_error(&dx, &num_dx, 1e-8) < 1e-6);
    }

    #[test]
    fn silu_pool_upsample_gradcheck() {
        let (h, w, c) = (4, 4, 3);
        let x = randvec(h * w * c, 9);
        let probe_small = randvec(h * w * c / 4, 10);
        let probe_big = randvec(h * w * c * 4, 11);

        // silu -> avgpool2 chain
        let f = |x: &[f64]| -> f64 {
            let mut a = vec![0.0; x.len()];
            silu(x, &mut a);
            let mut p = vec![0.0; x.len() / 4];
            avgpool2(&a, h, w, c, &mut p);
            p.iter().zip(&probe_small).map(|(u, v)| u * v).sum()
        };
        let mut da = vec![0.0; x.len()];
        avgpool2_bwd(&probe_small, h, w, c, &mut da);
        let mut dx = vec![0.0; x.len()];
        silu_bwd(&x, &da, &mut dx);
        let num = finite_difference_gradient(f, &x, 1e-6);
        assert!(max_relative_error(&dx, &num, 1e-8) < 1e-6);

        // upsample
        let g = |x: &[f64]| -> f64 {
            let mut u = vec![0.0; x.len() * 4];
            upsample2(x, h, w, c, &mut u);
            u.iter().zip(&probe_big).map(|(a, b)| a * b).sum()
        };
        let mut dxu = vec![0.0; x.len()];
        upsample2_bwd(&probe_big, h, w, c, &mut dxu);
        let num_u = finite_difference_gradient(g, &x, 1e-6);
        assert!(max_relative_error(&dxu, &num_u, 1e-8) < 1e-6);
    }

    #[test]
    fn linear_and_bias_gradcheck() {
        let (n_in, n_out) = (7, 4);
        let x = randvec(n_in, 12);
        let wgt = randvec(n_out * n_in, 13);
        let bias = randvec(n_out, 14);
        let probe = randvec(n_out, 15);
        let mut dx = vec![0.0; n_in];
        let mut dwgt = vec![0.0; wgt.len()];
        let mut dbias = vec![0.0; n_out];
        linear_bwd(&x, &wgt, n_out, &probe, &mut dx, &mut dwgt, &mut dbias);
        let num_dx = finite_difference_gradient(
            |p| {
                let mut y = vec![0.0; n_out];
                linear(p, &wgt, &bias, n_out, &mut y);
                y.iter().zip(&probe).map(|(a, b)| a * b).sum()
            },
            &x,
            1e-6,
        );
        let num_dw = finite_difference_gradient(
            |p| {
                let mut y = vec![0.0; n_out];
                linear(&x, p, &bias, n_out, &mut y);
                y.iter().zip(&probe).map(|(a, b)| a * b).sum()
            },
            &wgt,
            1e-6,
        );
        assert!(max_relative_error(&dx, &num_dx, 1e-8) < 1e-6);
        assert!(max_relative_error(&dwgt, &num_dw, 1e-8) < 1e-6);
    }

    #[test]
    fn attention_pool_gradcheck() {
        let (positions, c) = (6, 4);
        let feat = randvec(positions * c, 16);
        let score_w = randvec(c, 17);
        let probe = randvec(c, 18);
        let f = |feat: &[f64], score_w: &[f64]| -> f64 {
            let mut pooled = vec![0.0; c];
            attention_pool(feat, positions, c, score_w, &mut pooled);
            pooled.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let mut pooled = vec![0.0; c];
        let weights = attention_pool(&feat, positions, c, &score_w, &mut pooled);
        let mut dfeat = vec![0.0; feat.len()];
        let mut dscore_w = vec![0.0; c];
        attention_pool_bwd(
            &feat, positions, c, &score_w, &weights, &probe, &mut dfeat, &mut dscore_w,
        );
        let num_df = finite_difference_gradient(|p| f(p, &score_w), &feat, 1e-6);
        let num_dw = finite_difference_gradient(|p| f(&feat, p), &score_w, 1e-6);
        assert!(max_relative_error(&dfeat, &num_df, 1e-8) < 1e-6);
        assert!(max_relative_error(&dscore_w, &num_dw, 1e-8) < 1e-6);
    }

    #[test]
    fn init_is_deterministic_and_fan_scaled() {
        let mut layout = ParamLayout::new();
        let w = layout.add("w", &[8, 16], 16);
        let b = layout.add("b", &[8], 0);
        let p1: Vec<f32> = layout.init_params(3);
        let p2: Vec<f32> = layout.init_params(3);
        assert_eq!(p1, p2);
        let p64: Vec<f64> = layout.init_params(3);
        for (a, b) in p1.iter().zip(&p64) {
            assert_eq!(*a as f64, *b);
        }
        let bound = 1.0 / 4.0;
        assert!(layout.view(&p1, w).iter().all(|v| v.abs() < bound));
        assert!(layout.view(&p1, b).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn named_tensor_round_trip() {
        let mut layout = ParamLayout::new();
        layout.add("conv.w", &[2, 3, 3, 4], 36);
        layout.add("conv.b", &[2], 0);
        let params: Vec<f32> = layout.init_params(11);
        let named = layout.to_named_tensors(&params);
        let back: Vec<f32> = layout.from_named_tensors(&named).unwrap();
        assert_eq!(params, back);
        // missing tensor is a format error
        assert!(layout.from_named_tensors::<f32>(&named[..1]).is_err());
    }

    #[test]
    fn adam_zero_lr_and_zero_grads_are_noops() {
        let mut params = vec![1.0f64, -2.0, 0.5];
        let grads = vec![0.3, -0.1, 0.9];
        let mut state = AdamState::new(3);
        state
            .step(&mut params, &grads, &AdamConfig { lr: 0.0, ..Default::default() })
            .unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);

        let mut state = AdamState::new(3);
        state
            .step(&mut params, &[0.0; 3], &AdamConfig::default())
            .unwrap();
        assert_eq!(params, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let target = [3.0f64, -1.5];
        let mut params = vec![0.0f64, 0.0];
        let mut state = AdamState::new(2);
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        for _ in 0..500 {
            let grads: Vec<f64> = params.iter().zip(&target).map(|(p, t)| p - t).collect();
            state.step(&mut params, &grads, &cfg).unwrap();
        }
        let f: f64 = params
            .iter()
            .zip(&target)
            .map(|(p, t)| 0.5 * (p - t) * (p - t))
            .sum();
        assert!(f < 1e-6, "bowl objective {f}");
    }

    #[test]
    fn adam_clip_bounds_update_norm() {
        let mut params = vec![0.0f64; 4];
        let grads = vec![100.0f64; 4];
        let mut state = AdamState::new(4);
        let cfg = AdamConfig {
            lr: 1.0,
            grad_clip: Some(1.0),
            ..Default::default()
        };
        state.step(&mut params, &grads, &cfg).unwrap();
        // with clipped gradient 0.5 per element, the first adam step is
        // lr * g/|g| elementwise, bounded by lr
        for p in &params {
            assert!(p.abs() <= 1.0 + 1e-9);
        }
        let mut bad = AdamState::new(1);
        assert!(bad.step(&mut [0.0f64], &[f64::NAN], &AdamConfig::default()).is_err());
    }

    #[test]
    fn sinusoidal_embedding_shape_and_range() {
        let emb: Vec<f64> = sinusoidal_embedding(17, 32);
        assert_eq!(emb.len(), 32);
        assert!(emb.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(
            sinusoidal_embedding::<f64>(17, 32),
            sinusoidal_embedding::<f64>(18, 32)
        );
        // t = 0: sines vanish, cosines are one
        let e0: Vec<f64> = sinusoidal_embedding(0, 8);
        assert_eq!(e0, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }
}
