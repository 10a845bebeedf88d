//! Noise schedules, forward noising, reverse transition moments, the
//! noise-matching training objective, and the ancestral sampler with an
//! optional guidance hook.
//!
//! Conventions: steps are 1-indexed, `t` runs over `1..=T`; `alpha_bar(0)`
//! is 1 by definition. The reverse transition is the standard
//! noise-parameterized posterior: `mu = (z_t - beta_t/sqrt(1-abar_t) *
//! eps_hat) / sqrt(alpha_t)`, isotropic variance fixed to the posterior
//! `beta_tilde_t` (with `beta_tilde_1 = beta_1`). Schedule recurrences are
//! accumulated in f64.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rand_util;
use crate::tensor::TensorF32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl ScheduleKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::contract(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of alphas; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Reverse-transition variance `beta_tilde_t`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_steps() {
            return Err(Error::contract(format!(
                "step {} out of range 1..={}",
                t,
                self.t_steps()
            )));
        }
        Ok(())
    }
}

pub fn make_schedule(
    t_steps: usize,
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::contract("schedule needs at least one step"));
    }
    let beta: Vec<f64> = match kind {
        ScheduleKind::Linear => {
            if !(beta_min > 0.0 && beta_max < 1.0 && beta_min <= beta_max) {
                return Err(Error::contract(format!(
                    "linear schedule needs 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
                )));
            }
            (0..t_steps)
                .map(|i| {
                    if t_steps == 1 {
                        beta_min
                    } else {
                        beta_min + (beta_max - beta_min) * i as f64 / (t_steps - 1) as f64
                    }
                })
                .collect()
        }
        ScheduleKind::Cosine => {
            // squared-cosine alpha_bar profile with the usual beta cap
            let s = 0.008;
            let f = |t: f64| ((t / t_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                .cos()
                .powi(2);
            (1..=t_steps)
                .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, 0.999))
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut acc = 1.0f64;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let mut posterior_var = Vec::with_capacity(t_steps);
    for t in 1..=t_steps {
        let prev = if t == 1 { 1.0 } else { alpha_bar[t - 2] };
        let var = if t == 1 {
            beta[0]
        } else {
            (1.0 - prev) / (1.0 - alpha_bar[t - 1]) * beta[t - 1]
        };
        posterior_var.push(var);
    }
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        posterior_var,
    })
}

/// Closed-form forward noising `z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps`.
/// `t = 0` is the identity on `z0`.
pub fn q_sample(z0: &TensorF32, t: usize, eps: &TensorF32, sched: &NoiseSchedule) -> Result<TensorF32> {
    if t > sched.t_steps() {
        return Err(Error::contract(format!(
            "step {} out of range 0..={}",
            t,
            sched.t_steps()
        )));
    }
    z0.check_same_shape(eps)?;
    let abar = sched.alpha_bar(t);
    z0.axpby(abar.sqrt() as f32, eps, (1.0 - abar).sqrt() as f32)
}

/// Mean and isotropic variance of one reverse transition.
#[derive(Debug, Clone)]
pub struct TransitionMoments {
    pub mean: TensorF32,
    pub var: f64,
}

pub fn transition_moments(
    z_t: &TensorF32,
    t: usize,
    eps_hat: &TensorF32,
    sched: &NoiseSchedule,
) -> Result<TransitionMoments> {
    sched.check_t(t)?;
    z_t.check_same_shape(eps_hat)?;
    let beta = sched.beta(t);
    let abar = sched.alpha_bar(t);
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    let mean = z_t.axpby(
        inv_sqrt_alpha as f32,
        eps_hat,
        (-(inv_sqrt_alpha * beta / (1.0 - abar).sqrt())) as f32,
    )?;
    Ok(TransitionMoments {
        mean,
        var: sched.posterior_var(t),
    })
}

/// Noise predictor `eps_hat(z_t, t, z_cond)`. Conditional models require
/// `z_cond`; analytic reference models may ignore it.
pub trait EpsilonModel {
    fn predict_eps(&self, z_t: &TensorF32, t: usize, z_cond: Option<&TensorF32>) -> Result<TensorF32>;
}

/// Per-step guidance: returns the mean-shift gradient `g` evaluated at the
/// transition mean (the guidance scale is already folded into `g`), or
/// `None` to leave the transition untouched. `t_next` is the step index of
/// the state being produced.
pub trait GuidanceHook {
    fn gradient_at_mean(&self, mean: &TensorF32, t_next: usize) -> Result<Option<TensorF32>>;
}

/// Noise predictors that can also pull a vector back through their input
/// Jacobian: `vjp_eps` returns `(d eps_hat / d z_t)^T upstream`. Needed by
/// the exact oracle guidance path.
pub trait VjpEpsilonModel: EpsilonModel {
    fn vjp_eps(
        &self,
        z_t: &TensorF32,
        t: usize,
        z_cond: Option<&TensorF32>,
        upstream: &TensorF32,
    ) -> Result<TensorF32>;
}

/// Ancestral sampling of `z_0` given the latent context. Runs `t = T..1`;
/// each step computes the transition moments, lets the guidance hook shift
/// the mean, then draws with the posterior variance (no noise at `t = 1`).
pub fn sample<R: Rng>(
    z_cond: Option<&TensorF32>,
    z_shape: &[usize],
    model: &dyn EpsilonModel,
    sched: &NoiseSchedule,
    rng: &mut R,
    guidance: Option<&dyn GuidanceHook>,
) -> Result<TensorF32> {
    let mut z = rand_util::normal_tensor(z_shape.to_vec(), rng);
    for t in (1..=sched.t_steps()).rev() {
        let eps_hat = model.predict_eps(&z, t, z_cond)?;
        let mut moments = transition_moments(&z, t, &eps_hat, sched)?;
        if let Some(hook) = guidance {
            if let Some(g) = hook.gradient_at_mean(&moments.mean, t - 1)? {
                moments = crate::alignment::apply_guidance(&moments, &g)?;
            }
        }
        if t > 1 {
            let noise = rand_util::normal_tensor(z_shape.to_vec(), rng);
            z = moments.mean.axpby(1.0, &noise, moments.var.sqrt() as f32)?;
        } else {
            z = moments.mean;
        }
    }
    if !z.all_finite() {
        return Err(Error::NonFinite("sampler produced non-finite latent".into()));
    }
    Ok(z)
}

/// Independent chains in parallel, one derived rng stream per member.
/// Output order follows `member_seeds`, so results do not depend on the
/// worker count.
pub fn sample_ensemble(
    z_cond: Option<&TensorF32>,
    z_shape: &[usize],
    model: &(dyn EpsilonModel + Sync),
    sched: &NoiseSchedule,
    member_seeds: &[u64],
    guidance: Option<&(dyn GuidanceHook + Sync)>,
) -> Result<Vec<TensorF32>> {
    member_seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = rand_util::rng_from_seed(seed);
            sample(
                z_cond,
                z_shape,
                model,
                sched,
                &mut rng,
                guidance.map(|g| g as &dyn GuidanceHook),
            )
        })
        .collect()
}

/// One training item for the noise-matching objective.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub z_t: TensorF32,
    pub t: usize,
    pub z_cond: TensorF32,
    pub eps: TensorF32,
}

/// Trained denoisers expose their loss and exact parameter gradients on a
/// batch of noising items; the mean-squared residual and its gradients are
/// averaged over the batch.
pub trait TrainableDenoiser {
    fn loss_and_grads(&self, items: &[TrainItem]) -> Result<(f64, Vec<f32>)>;
}

/// Builds the noising items of the training objective for a batch of
/// pixel-space (target, context) pairs: per item draw `t ~ U{1..T}`,
/// `eps ~ N(0, I)`, encode both sequences and form `z_t` by `q_sample`.
pub fn make_train_items<R: Rng>(
    batch: &[(&TensorF32, &TensorF32)],
    codec: &crate::codec::CodecSpec,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<TrainItem>> {
    if batch.is_empty() {
        return Err(Error::contract("batch must be nonempty"));
    }
    let mut items = Vec::with_capacity(batch.len());
    for (x, y) in batch {
        let z0 = crate::codec::encode_seq(x, codec)?;
        let z_cond = crate::codec::encode_seq(y, codec)?;
        let t = rng.gen_range(1..=sched.t_steps());
        let eps = rand_util::normal_tensor(z0.shape().to_vec(), rng);
        let z_t = q_sample(&z0, t, &eps, sched)?;
        items.push(TrainItem { z_t, t, z_cond, eps });
    }
    Ok(items)
}

/// The training objective: mean squared noise residual over a batch, with
/// exact parameter gradients delegated to the denoiser.
pub fn training_loss<R: Rng>(
    batch: &[(&TensorF32, &TensorF32)],
    denoiser: &dyn TrainableDenoiser,
    codec: &crate::codec::CodecSpec,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, Vec<f32>)> {
    let items = make_train_items(batch, codec, sched, rng)?;
    denoiser.loss_and_grads(&items)
}

// ---------------------------------------------------------------------------
// Analytic reference model
// ---------------------------------------------------------------------------

/// Closed-form optimal noise predictor for Gaussian data `z0 ~ N(m, S)`
/// living in a `[1, 1, 1, d]` latent: `eps*(z_t, t) = (z_t - sqrt(abar_t)
/// E[z0|z_t]) / sqrt(1-abar_t)` with the conjugate posterior mean
/// `E[z0|z_t] = m + sqrt(abar_t) S (abar_t S + (1-abar_t) I)^{-1}
/// (z_t - sqrt(abar_t) m)`. Drives the sampler-correctness and guidance
/// oracle checks without any training.
#[derive(Debug, Clone)]
pub struct GaussianConjugateDenoiser {
    pub mean: Vec<f64>,
    /// Row-major symmetric covariance, d x d.
    pub cov: Vec<f64>,
}

impl GaussianConjugateDenoiser {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::contract("covariance must be d x d"));
        }
        for i in 0..d {
            for j in 0..d {
                if (cov[i * d + j] - cov[j * d + i]).abs() > 1e-12 {
                    return Err(Error::contract("covariance must be symmetric"));
                }
            }
        }
        Ok(GaussianConjugateDenoiser { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Posterior mean of z0 given z_t at noising level abar.
    pub fn posterior_mean(&self, z_t: &[f64], abar: f64) -> Vec<f64> {
        let d = self.dim();
        // A = abar S + (1-abar) I
        let mut a = vec![0.0f64; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = abar * self.cov[i * d + j] + if i == j { 1.0 - abar } else { 0.0 };
            }
        }
        let rhs: Vec<f64> = (0..d)
            .map(|i| z_t[i] - abar.sqrt() * self.mean[i])
            .collect();
        let x = solve_small(&a, &rhs);
        (0..d)
            .map(|i| {
                let sx: f64 = (0..d).map(|j| self.cov[i * d + j] * x[j]).sum();
                self.mean[i] + abar.sqrt() * sx
            })
            .collect()
    }

    /// Jacobian d(E[z0|z_t])/d(z_t) = sqrt(abar) S A^{-1}, row-major.
    pub fn posterior_mean_jacobian(&self, abar: f64) -> Vec<f64> {
        let d = self.dim();
        let mut a = vec![0.0f64; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = abar * self.cov[i * d + j] + if i == j { 1.0 - abar } else { 0.0 };
            }
        }
        let mut jac = vec![0.0f64; d * d];
        for col in 0..d {
            let mut e = vec![0.0f64; d];
            e[col] = 1.0;
            let x = solve_small(&a, &e);
            for row in 0..d {
                let sx: f64 = (0..d).map(|j| self.cov[row * d + j] * x[j]).sum();
                jac[row * d + col] = abar.sqrt() * sx;
            }
        }
        jac
    }
}

impl GaussianConjugateDenoiser {
    /// Binds a schedule so the model can be used as an `EpsilonModel`.
    pub fn with_schedule<'a>(&'a self, sched: &'a NoiseSchedule) -> GaussianOracleModel<'a> {
        GaussianOracleModel { inner: self, sched }
    }
}

/// `GaussianConjugateDenoiser` bound to a schedule.
pub struct GaussianOracleModel<'a> {
    inner: &'a GaussianConjugateDenoiser,
    sched: &'a NoiseSchedule,
}

impl EpsilonModel for GaussianOracleModel<'_> {
    fn predict_eps(&self, z_t: &TensorF32, t: usize, _z_cond: Option<&TensorF32>) -> Result<TensorF32> {
        let d = self.inner.dim();
        if z_t.len() != d {
            return Err(Error::ShapeMismatch {
                expected: vec![1, 1, 1, d],
                got: z_t.shape().to_vec(),
            });
        }
        self.sched.check_t(t)?;
        let abar = self.sched.alpha_bar(t);
        let z: Vec<f64> = z_t.data().iter().map(|&v| v as f64).collect();
        let post = self.inner.posterior_mean(&z, abar);
        let denom = (1.0 - abar).max(1e-18).sqrt();
        let eps: Vec<f32> = (0..d)
            .map(|i| ((z[i] - abar.sqrt() * post[i]) / denom) as f32)
            .collect();
        Ok(TensorF32::from_parts(z_t.shape().to_vec(), eps))
    }
}

impl VjpEpsilonModel for GaussianOracleModel<'_> {
    fn vjp_eps(
        &self,
        z_t: &TensorF32,
        t: usize,
        _z_cond: Option<&TensorF32>,
        upstream: &TensorF32,
    ) -> Result<TensorF32> {
        let d = self.inner.dim();
        if z_t.len() != d || upstream.len() != d {
            return Err(Error::contract("oracle vjp dimension mismatch"));
        }
        self.sched.check_t(t)?;
        let abar = self.sched.alpha_bar(t);
        // eps* = (z - sqrt(abar) postmean(z)) / sqrt(1 - abar), so the
        // transposed Jacobian applied to u is (u - sqrt(abar) J^T u) /
        // sqrt(1 - abar).
        let jac = self.inner.posterior_mean_jacobian(abar);
        let u: Vec<f64> = upstream.data().iter().map(|&v| v as f64).collect();
        let denom = (1.0 - abar).max(1e-18).sqrt();
        let out: Vec<f32> = (0..d)
            .map(|i| {
                let jtu: f64 = (0..d).map(|r| jac[r * d + i] * u[r]).sum();
                ((u[i] - abar.sqrt() * jtu) / denom) as f32
            })
            .collect();
        Ok(TensorF32::from_parts(z_t.shape().to_vec(), out))
    }
}

/// Gaussian elimination with partial pivoting for the tiny systems used by
/// the analytic model.
pub(crate) fn solve_small(a: &[f64], b: &[f64]) -> Vec<f64> {
    let d = b.len();
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| m[i * d + col].abs().partial_cmp(&m[j * d + col].abs()).unwrap())
            .unwrap();
        if pivot != col {
            for k in 0..d {
                m.swap(col * d + k, pivot * d + k);
            }
            x.swap(col, pivot);
        }
        let p = m[col * d + col];
        for row in (col + 1)..d {
            let f = m[row * d + col] / p;
            for k in col..d {
                m[row * d + k] -= f * m[col * d + k];
            }
            x[row] -= f * x[col];
        }
    }
    for col in (0..d).rev() {
        x[col] /= m[col * d + col];
        for row in 0..col {
            x[row] -= m[row * d + col] * x[col];
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn default_sched() -> NoiseSchedule {
        make_schedule(200, ScheduleKind::Linear, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, ScheduleKind::Linear, 0.5, 0.5).unwrap();
        assert_eq!(s.t_steps(), 1);
        assert_eq!(s.alpha_bar(1), 0.5);
        assert_eq!(s.posterior_var(1), 0.5);
    }

    #[test]
    fn alpha_bar_recursion_is_exact() {
        let s = default_sched();
        for t in 2..=s.t_steps() {
            let lhs = s.alpha_bar(t);
            let rhs = s.alpha_bar(t - 1) * s.alpha(t);
            assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
        }
    }

    #[test]
    fn long_linear_schedule_reaches_pure_noise() {
        let s = make_schedule(1000, ScheduleKind::Linear, 1e-4, 2e-2).unwrap();
        // independent direct-product evaluation
        let mut direct = 1.0f64;
        for t in 1..=1000 {
            direct *= 1.0 - (1e-4 + (2e-2 - 1e-4) * (t - 1) as f64 / 999.0);
        }
        assert!((s.alpha_bar(1000) - direct).abs() <= 1e-12 * direct.max(1e-30));
        assert!(s.alpha_bar(1000) < 5e-5, "alpha_bar(T) = {}", s.alpha_bar(1000));
    }

    #[test]
    fn schedule_is_monotone_and_posterior_var_bounded() {
        for s in [
            default_sched(),
            make_schedule(100, ScheduleKind::Cosine, 0.0, 0.0).unwrap(),
        ] {
            for t in 1..=s.t_steps() {
                assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                assert!(s.posterior_var(t) <= s.beta(t) + 1e-15);
                if t >= 2 {
                    assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                }
            }
        }
    }

    #[test]
    fn make_schedule_rejects_bad_ranges() {
        assert!(make_schedule(0, ScheduleKind::Linear, 1e-4, 2e-2).is_err());
        assert!(make_schedule(10, ScheduleKind::Linear, 0.0, 0.5).is_err());
        assert!(make_schedule(10, ScheduleKind::Linear, 0.2, 0.1).is_err());
        assert!(make_schedule(10, ScheduleKind::Linear, 0.1, 1.5).is_err());
    }

    #[test]
    fn q_sample_identities() {
        let sched = default_sched();
        let z0 = TensorF32::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let eps = TensorF32::new(vec![2, 2], vec![0.3, 0.1, -0.7, 0.9]).unwrap();
        // t = 0 convention: identity on z0
        assert_eq!(q_sample(&z0, 0, &eps, &sched).unwrap(), z0);
        // z0 = 0: pure scaled noise
        let zeros = TensorF32::zeros(vec![2, 2]);
        let zt = q_sample(&zeros, 50, &eps, &sched).unwrap();
        let scale = (1.0 - sched.alpha_bar(50)).sqrt() as f32;
        for (a, b) in zt.data().iter().zip(eps.data()) {
            assert!((a - scale * b).abs() < 1e-6);
        }
        assert!(q_sample(&z0, 201, &eps, &sched).is_err());
        assert!(q_sample(&z0, 1, &TensorF32::zeros(vec![3]), &sched).is_err());
    }

    #[test]
    fn iterated_single_step_noising_matches_closed_form_marginal() {
        // Monte-Carlo composition oracle on a scalar chain.
        let t_steps = 60;
        let sched = make_schedule(t_steps, ScheduleKind::Linear, 1e-3, 5e-2).unwrap();
        let z0 = 1.7f64;
        let n = 100_000;
        let mut rng = rand_util::rng_from_seed(42);
        for &t_target in &[1usize, t_steps / 2, t_steps] {
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for _ in 0..n {
                let mut z = z0;
                for t in 1..=t_target {
                    let xi = rand_util::standard_normal(&mut rng);
                    z = sched.alpha(t).sqrt() * z + sched.beta(t).sqrt() * xi;
                }
                sum += z;
                sumsq += z * z;
            }
            let mean = sum / n as f64;
            let var = sumsq / n as f64 - mean * mean;
            let want_mean = sched.alpha_bar(t_target).sqrt() * z0;
            let want_var = 1.0 - sched.alpha_bar(t_target);
            let se_mean = (want_var / n as f64).sqrt();
            let se_var = want_var * (2.0 / n as f64).sqrt();
            assert!(
                (mean - want_mean).abs() <= 3.0 * se_mean,
                "t={t_target}: mean {mean} vs {want_mean} (se {se_mean})"
            );
            assert!(
                (var - want_var).abs() <= 3.0 * se_var,
                "t={t_target}: var {var} vs {want_var} (se {se_var})"
            );
        }
    }

    #[test]
    fn transition_mean_matches_exact_posterior_when_eps_is_true() {
        // With eps_hat equal to the true injected noise, the
        // noise-parameterized mean equals the closed-form posterior mean of
        // q(z_{t-1} | z_t, z0).
        let sched = default_sched();
        let mut rng = rand_util::rng_from_seed(5);
        let z0 = rand_util::normal_tensor(vec![4, 3], &mut rng);
        for &t in &[1usize, 7, 100, 200] {
            let eps = rand_util::normal_tensor(vec![4, 3], &mut rng);
            let z_t = q_sample(&z0, t, &eps, &sched).unwrap();
            let m = transition_moments(&z_t, t, &eps, &sched).unwrap();
            let abar = sched.alpha_bar(t);
            let abar_prev = sched.alpha_bar(t - 1);
            let beta = sched.beta(t);
            let c0 = abar_prev.sqrt() * beta / (1.0 - abar);
            let ct = sched.alpha(t).sqrt() * (1.0 - abar_prev) / (1.0 - abar);
            for i in 0..z0.len() {
                let want = c0 * z0.data()[i] as f64 + ct * z_t.data()[i] as f64;
                assert!(
                    (m.mean.data()[i] as f64 - want).abs() < 1e-5,
                    "t={t} i={i}: {} vs {want}",
                    m.mean.data()[i]
                );
            }
            if t == 1 {
                assert_eq!(m.var, sched.beta(1));
            }
        }
    }

    #[test]
    fn transition_mean_approaches_z_t_for_tiny_beta() {
        let sched = make_schedule(5, ScheduleKind::Linear, 1e-9, 1e-9).unwrap();
        let z_t = TensorF32::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let eps = TensorF32::filled(vec![3], 0.7);
        let m = transition_moments(&z_t, 3, &eps, &sched).unwrap();
        for (a, b) in m.mean.data().iter().zip(z_t.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn transition_moments_rejects_out_of_range_t() {
        let sched = default_sched();
        let z = TensorF32::zeros(vec![2]);
        assert!(transition_moments(&z, 0, &z, &sched).is_err());
        assert!(transition_moments(&z, 201, &z, &sched).is_err());
    }

    struct ZeroModel;
    impl EpsilonModel for ZeroModel {
        fn predict_eps(&self, z_t: &TensorF32, _t: usize, _c: Option<&TensorF32>) -> Result<TensorF32> {
            Ok(TensorF32::zeros(z_t.shape().to_vec()))
        }
    }

    struct CountingModel(AtomicUsize);
    impl EpsilonModel for CountingModel {
        fn predict_eps(&self, z_t: &TensorF32, _t: usize, _c: Option<&TensorF32>) -> Result<TensorF32> {
            self.0.fetch_add(1, Ordering::Relaxed);
            Ok(TensorF32::zeros(z_t.shape().to_vec()))
        }
    }

    #[test]
    fn sampler_is_deterministic_and_calls_model_t_times() {
        let sched = make_schedule(37, ScheduleKind::Linear, 1e-4, 2e-2).unwrap();
        let counting = CountingModel(AtomicUsize::new(0));
        let mut rng = rand_util::rng_from_seed(9);
        let a = sample(None, &[1, 1, 1, 2], &counting, &sched, &mut rng, None).unwrap();
        assert_eq!(counting.0.load(Ordering::Relaxed), 37);
        let mut rng = rand_util::rng_from_seed(9);
        let b = sample(None, &[1, 1, 1, 2], &ZeroModel, &sched, &mut rng, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_oracle_sampler_recovers_moments_coarsely() {
        // Tight-tolerance version runs in the acceptance suite; this is a
        // fast smoke check of the conjugate model plumbing.
        let sched = make_schedule(120, ScheduleKind::Linear, 1e-3, 8e-2).unwrap();
        let data = GaussianConjugateDenoiser::new(vec![0.5, -0.3], vec![1.0, 0.0, 0.0, 0.16]).unwrap();
        let model = data.with_schedule(&sched);
        let n = 2000;
        let mut rng = rand_util::rng_from_seed(31);
        let mut sum = [0.0f64; 2];
        let mut sumsq = [0.0f64; 2];
        for _ in 0..n {
            let z = sample(None, &[1, 1, 1, 2], &model, &sched, &mut rng, None).unwrap();
            for k in 0..2 {
                let v = z.data()[k] as f64;
                sum[k] += v;
                sumsq[k] += v * v;
            }
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let var = sumsq[k] / n as f64 - mean * mean;
            let want_var = if k == 0 { 1.0 } else { 0.16 };
            assert!((mean - data.mean[k]).abs() < 0.1, "mean[{k}] = {mean}");
            assert!((var - want_var).abs() < 0.25 * want_var, "var[{k}] = {var}");
        }
    }

    #[test]
    fn ensemble_matches_sequential_sampling() {
        let sched = make_schedule(25, ScheduleKind::Linear, 1e-4, 2e-2).unwrap();
        let data = GaussianConjugateDenoiser::new(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let model = data.with_schedule(&sched);
        let seeds: Vec<u64> = (0..6).map(|i| rand_util::derive_seed(77, i)).collect();
        let members = sample_ensemble(None, &[1, 1, 1, 2], &model, &sched, &seeds, None).unwrap();
        for (i, &seed) in seeds.iter().enumerate() {
            let mut rng = rand_util::rng_from_seed(seed);
            let single = sample(None, &[1, 1, 1, 2], &model, &sched, &mut rng, None).unwrap();
            assert_eq!(members[i], single, "member {i}");
        }
    }

    #[test]
    fn solve_small_inverts_system() {
        let a = vec![4.0, 1.0, 2.0, 3.0];
        let b = vec![1.0, 2.0];
        let x = solve_small(&a, &b);
        assert!((4.0 * x[0] + 1.0 * x[1] - 1.0).abs() < 1e-12);
        assert!((2.0 * x[0] + 3.0 * x[1] - 2.0).abs() < 1e-12);
    }
}
