//! Forecast verification: pixel metrics, thresholded contingency scores
//! with pooled variants, ensemble CRPS, and energy-error metrics.
//!
//! Intensities in [0, 1] are rescaled to 0-255 and binarized at the
//! standard thresholds with the `>=` convention. Pooled scores max-pool the
//! rescaled intensities (kernel = stride = s) before binarization. The
//! ensemble convention: contingency-family scores are computed on the
//! ensemble mean, CRPS on the members, and plain pixel metrics are averaged
//! over member scores.

use crate::error::{Error, Result};
use crate::tensor::TensorF32;

pub const THRESHOLDS: [f64; 6] = [16.0, 74.0, 133.0, 160.0, 181.0, 219.0];
pub const POOL_SCALES: [usize; 2] = [4, 16];
pub const INTENSITY_SCALE: f64 = 255.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ContingencyCounts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl ContingencyCounts {
    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    pub fn merge(&mut self, other: &ContingencyCounts) {
        self.hits += other.hits;
        self.misses += other.misses;
        self.false_alarms += other.false_alarms;
        self.correct_negatives += other.correct_negatives;
    }
}

fn check_unit_range(t: &TensorF32, what: &str) -> Result<()> {
    if t.data().iter().any(|&v| !(-1e-6..=1.0 + 1e-6).contains(&(v as f64))) {
        return Err(Error::contract(format!("{what} values must lie in [0, 1]")));
    }
    Ok(())
}

/// Exact contingency counts after rescaling to 0-255 and binarizing at
/// `threshold` with the `>=` convention.
pub fn contingency(pred: &TensorF32, truth: &TensorF32, threshold: f64) -> Result<ContingencyCounts> {
    pred.check_same_shape(truth)?;
    check_unit_range(pred, "pred")?;
    check_unit_range(truth, "truth")?;
    let mut c = ContingencyCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let p1 = (p as f64 * INTENSITY_SCALE) >= threshold;
        let t1 = (t as f64 * INTENSITY_SCALE) >= threshold;
        match (t1, p1) {
            (true, true) => c.hits += 1,
            (true, false) => c.misses += 1,
            (false, true) => c.false_alarms += 1,
            (false, false) => c.correct_negatives += 1,
        }
    }
    Ok(c)
}

/// Critical success index `H / (H + M + F)`; defined as 0 when the
/// denominator vanishes.
pub fn csi(counts: &ContingencyCounts) -> f64 {
    let denom = counts.hits + counts.misses + counts.false_alarms;
    if denom == 0 {
        0.0
    } else {
        counts.hits as f64 / denom as f64
    }
}

/// Frequency bias `(H + F) / (H + M)`; undefined when nothing was observed.
pub fn bias(counts: &ContingencyCounts) -> Option<f64> {
    let denom = counts.hits + counts.misses;
    if denom == 0 {
        None
    } else {
        Some((counts.hits + counts.false_alarms) as f64 / denom as f64)
    }
}

/// Spatial max-pool (kernel = stride = `s`) of each frame's rescaled
/// intensities; `[L, H, W, C]` in, `[L, H/s, W/s, C]` out conceptually.
fn max_pool_field(field: &TensorF32, s: usize) -> Result<TensorF32> {
    if field.shape().len() != 4 {
        return Err(Error::contract("pooled scores need [L, H, W, C] fields"));
    }
    let (l, h, w, c) = (
        field.shape()[0],
        field.shape()[1],
        field.shape()[2],
        field.shape()[3],
    );
    if h % s != 0 || w % s != 0 {
        return Err(Error::contract(format!("{h}x{w} not divisible by pool scale {s}")));
    }
    let (oh, ow) = (h / s, w / s);
    let mut out = vec![0.0f32; l * oh * ow * c];
    for li in 0..l {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut m = f32::NEG_INFINITY;
                    for dy in 0..s {
                        for dx in 0..s {
                            let v = field.data()
                                [((li * h + oy * s + dy) * w + ox * s + dx) * c + ch];
                            if v > m {
                                m = v;
                            }
                        }
                    }
                    out[((li * oh + oy) * ow + ox) * c + ch] = m;
                }
            }
        }
    }
    Ok(TensorF32::from_parts(vec![l, oh, ow, c], out))
}

/// Contingency counts on max-pooled fields.
pub fn pooled_contingency(
    pred: &TensorF32,
    truth: &TensorF32,
    threshold: f64,
    s: usize,
) -> Result<ContingencyCounts> {
    if s == 1 {
        return contingency(pred, truth, threshold);
    }
    contingency(&max_pool_field(pred, s)?, &max_pool_field(truth, s)?, threshold)
}

/// CSI at pooling scale `s`.
pub fn pooled_csi(pred: &TensorF32, truth: &TensorF32, threshold: f64, s: usize) -> Result<f64> {
    Ok(csi(&pooled_contingency(pred, truth, threshold, s)?))
}

/// Empirical per-pixel ensemble CRPS
/// `(1/M) sum |X_i - y| - 1/(2 M^2) sum sum |X_i - X_j|`, averaged over all
/// elements. Reduces to the MAE for a single member.
pub fn crps_ensemble(members: &[TensorF32], truth: &TensorF32) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::contract("CRPS needs at least one ensemble member"));
    }
    for m in members {
        truth.check_same_shape(m)?;
    }
    let m = members.len();
    let n = truth.len();
    let mut total = 0.0f64;
    for e in 0..n {
        let y = truth.data()[e] as f64;
        let mut acc = 0.0;
        for a in members {
            acc += (a.data()[e] as f64 - y).abs();
        }
        let mut spread = 0.0;
        for a in members {
            for b in members {
                spread += (a.data()[e] as f64 - b.data()[e] as f64).abs();
            }
        }
        total += acc / m as f64 - spread / (2.0 * (m * m) as f64);
    }
    Ok(total / n as f64)
}

pub fn mse(pred: &TensorF32, truth: &TensorF32) -> Result<f64> {
    pred.check_same_shape(truth)?;
    Ok(pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&a, &b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn mae(pred: &TensorF32, truth: &TensorF32) -> Result<f64> {
    pred.check_same_shape(truth)?;
    Ok(pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&a, &b)| ((a - b) as f64).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - mid).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Gaussian-filtered plane restricted to valid window centers, computed
/// separably. `plane` is `h x w`; output is `(h - 10) x (w - 10)`.
fn gaussian_filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = SSIM_WINDOW / 2;
    let vw = w - 2 * half;
    let vh = h - 2 * half;
    let mut rows = vec![0.0f64; h * vw];
    for r in 0..h {
        for c in 0..vw {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * plane[r * w + c + k];
            }
            rows[r * vw + c] = acc;
        }
    }
    let mut out = vec![0.0f64; vh * vw];
    for r in 0..vh {
        for c in 0..vw {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * rows[(r + k) * vw + c];
            }
            out[r * vw + c] = acc;
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, kernel: &[f64; SSIM_WINDOW]) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "frames must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for the structural index"
        )));
    }
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = gaussian_filter_valid(x, h, w, kernel);
    let mu_y = gaussian_filter_valid(y, h, w, kernel);
    let m_xx = gaussian_filter_valid(&xx, h, w, kernel);
    let m_yy = gaussian_filter_valid(&yy, h, w, kernel);
    let m_xy = gaussian_filter_valid(&xy, h, w, kernel);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut sum = 0.0;
    for i in 0..mu_x.len() {
        let (ux, uy) = (mu_x[i], mu_y[i]);
        let vx = m_xx[i] - ux * ux;
        let vy = m_yy[i] - uy * uy;
        let cxy = m_xy[i] - ux * uy;
        sum += (2.0 * ux * uy + c1) * (2.0 * cxy + c2)
            / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(sum / mu_x.len() as f64)
}

/// Mean structural similarity over frames and channels: 11x11 Gaussian
/// window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1.
pub fn ssim(pred: &TensorF32, truth: &TensorF32) -> Result<f64> {
    pred.check_same_shape(truth)?;
    if pred.shape().len() != 4 {
        return Err(Error::contract("structural index needs [L, H, W, C] sequences"));
    }
    let (l, h, w, c) = (
        pred.shape()[0],
        pred.shape()[1],
        pred.shape()[2],
        pred.shape()[3],
    );
    let kernel = ssim_kernel();
    let mut total = 0.0;
    for li in 0..l {
        for ch in 0..c {
            let plane = |t: &TensorF32| -> Vec<f64> {
                (0..h * w)
                    .map(|i| t.data()[(li * h * w + i) * c + ch] as f64)
                    .collect()
            };
            total += ssim_plane(&plane(pred), &plane(truth), h, w, &kernel)?;
        }
    }
    Ok(total / (l * c) as f64)
}

/// Energy errors of a forecast ensemble against the reference energy
/// `e0`: means over members and frames of the squared and absolute
/// deviations. Per-frame energies come from the caller (simulator records
/// or a trained detector).
pub fn energy_metrics(member_energies: &[Vec<f64>], e0: f64) -> Result<(f64, f64)> {
    if member_energies.is_empty() || member_energies.iter().any(|m| m.is_empty()) {
        return Err(Error::contract("energy metrics need nonempty energy sequences"));
    }
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut n = 0usize;
    for member in member_energies {
        for &e in member {
            se += (e - e0) * (e - e0);
            ae += (e - e0).abs();
            n += 1;
        }
    }
    Ok((se / n as f64, ae / n as f64))
}

// ---------------------------------------------------------------------------
// Report assembly
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    pub crps: f64,
    pub csi: [f64; 6],
    pub csi_mean: f64,
    pub csi_pool4: [f64; 6],
    pub csi_pool4_mean: f64,
    pub csi_pool16: [f64; 6],
    pub csi_pool16_mean: f64,
    pub bias: [Option<f64>; 6],
    pub bias_mean: Option<f64>,
    pub e_mse: Option<f64>,
    pub e_mae: Option<f64>,
}

impl MetricsReport {
    pub fn csv_header() -> String {
        let mut cols = vec!["model".to_string()];
        for name in ["mse", "mae", "ssim", "crps"] {
            cols.push(name.to_string());
        }
        for t in THRESHOLDS {
            cols.push(format!("csi_{}", t as u32));
        }
        cols.push("csi_m".into());
        for s in POOL_SCALES {
            for t in THRESHOLDS {
                cols.push(format!("csi_pool{}_{}", s, t as u32));
            }
            cols.push(format!("csi_pool{}_m", s));
        }
        for t in THRESHOLDS {
            cols.push(format!("bias_{}", t as u32));
        }
        cols.push("bias_m".into());
        cols.push("e_mse".into());
        cols.push("e_mae".into());
        cols.join(",")
    }

    pub fn csv_row(&self, model: &str) -> String {
        let fmt = |v: f64| format!("{v:.6}");
        let fmt_opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
        let mut cols = vec![model.to_string()];
        cols.push(fmt(self.mse));
        cols.push(fmt(self.mae));
        cols.push(fmt(self.ssim));
        cols.push(fmt(self.crps));
        for v in self.csi {
            cols.push(fmt(v));
        }
        cols.push(fmt(self.csi_mean));
        for v in self.csi_pool4 {
            cols.push(fmt(v));
        }
        cols.push(fmt(self.csi_pool4_mean));
        for v in self.csi_pool16 {
            cols.push(fmt(v));
        }
        cols.push(fmt(self.csi_pool16_mean));
        for v in self.bias {
            cols.push(fmt_opt(v));
        }
        cols.push(fmt_opt(self.bias_mean));
        cols.push(fmt_opt(self.e_mse));
        cols.push(fmt_opt(self.e_mae));
        cols.join(",")
    }
}

/// Accumulates per-sample ensemble evaluations into one report: contingency
/// counts (on ensemble means) are pooled across samples, pixel metrics and
/// CRPS are averaged, energy deviations are averaged over every
/// (member, frame) pair.
#[derive(Debug, Clone, Default)]
pub struct EvalAccumulator {
    counts: [ContingencyCounts; 6],
    counts_p4: [ContingencyCounts; 6],
    counts_p16: [ContingencyCounts; 6],
    mse_sum: f64,
    mae_sum: f64,
    ssim_sum: f64,
    crps_sum: f64,
    samples: usize,
    member_scores: usize,
    energy_se_sum: f64,
    energy_ae_sum: f64,
    energy_terms: usize,
}

impl EvalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ensemble_mean(members: &[TensorF32]) -> Result<TensorF32> {
        if members.is_empty() {
            return Err(Error::contract("empty ensemble"));
        }
        let mut mean = vec![0.0f32; members[0].len()];
        for m in members {
            members[0].check_same_shape(m)?;
            for (acc, &v) in mean.iter_mut().zip(m.data()) {
                *acc += v;
            }
        }
        let inv = 1.0 / members.len() as f32;
        for v in &mut mean {
            *v *= inv;
        }
        Ok(TensorF32::from_parts(members[0].shape().to_vec(), mean))
    }

    pub fn add_sample(
        &mut self,
        members: &[TensorF32],
        truth: &TensorF32,
        energies: Option<(&[Vec<f64>], f64)>,
    ) -> Result<()> {
        let mean = Self::ensemble_mean(members)?;
        for (i, &thr) in THRESHOLDS.iter().enumerate() {
            self.counts[i].merge(&contingency(&mean, truth, thr)?);
            self.counts_p4[i].merge(&pooled_contingency(&mean, truth, thr, POOL_SCALES[0])?);
            self.counts_p16[i].merge(&pooled_contingency(&mean, truth, thr, POOL_SCALES[1])?);
        }
        for m in members {
            self.mse_sum += mse(m, truth)?;
            self.mae_sum += mae(m, truth)?;
            self.ssim_sum += ssim(m, truth)?;
            self.member_scores += 1;
        }
        self.crps_sum += crps_ensemble(members, truth)?;
        self.samples += 1;
        if let Some((member_energies, e0)) = energies {
            let (se, ae) = energy_metrics(member_energies, e0)?;
            let terms: usize = member_energies.iter().map(Vec::len).sum();
            self.energy_se_sum += se * terms as f64;
            self.energy_ae_sum += ae * terms as f64;
            self.energy_terms += terms;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.samples == 0 {
            return Err(Error::contract("no samples accumulated"));
        }
        let per_thr = |counts: &[ContingencyCounts; 6]| -> ([f64; 6], f64) {
            let mut vals = [0.0f64; 6];
            for (i, c) in counts.iter().enumerate() {
                vals[i] = csi(c);
            }
            let mean = vals.iter().sum::<f64>() / 6.0;
            (vals, mean)
        };
        let (csi_v, csi_m) = per_thr(&self.counts);
        let (p4, p4m) = per_thr(&self.counts_p4);
        let (p16, p16m) = per_thr(&self.counts_p16);
        let mut bias_v = [None; 6];
        for (i, c) in self.counts.iter().enumerate() {
            bias_v[i] = bias(c);
        }
        let defined: Vec<f64> = bias_v.iter().flatten().copied().collect();
        let bias_m = if defined.len() == 6 {
            Some(defined.iter().sum::<f64>() / 6.0)
        } else {
            None
        };
        Ok(MetricsReport {
            mse: self.mse_sum / self.member_scores as f64,
            mae: self.mae_sum / self.member_scores as f64,
            ssim: self.ssim_sum / self.member_scores as f64,
            crps: self.crps_sum / self.samples as f64,
            csi: csi_v,
            csi_mean: csi_m,
            csi_pool4: p4,
            csi_pool4_mean: p4m,
            csi_pool16: p16,
            csi_pool16_mean: p16m,
            bias: bias_v,
            bias_mean: bias_m,
            e_mse: (self.energy_terms > 0).then(|| self.energy_se_sum / self.energy_terms as f64),
            e_mae: (self.energy_terms > 0).then(|| self.energy_ae_sum / self.energy_terms as f64),
        })
    }
}
