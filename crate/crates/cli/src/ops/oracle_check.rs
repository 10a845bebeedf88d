//! Analytic health check of the sampler and the guided transition: a 2-D
//! Gaussian task with the closed-form conjugate denoiser, where every
//! distributional property is known exactly.

use anyhow::Result;
use gnwd_core::alignment::{GuidanceConfig, OracleGuidance, PixelConstraint};
use gnwd_core::codec::CodecSpec;
use gnwd_core::config::PipelineConfig;
use gnwd_core::diffusion::{sample_ensemble, GaussianConjugateDenoiser, GuidanceHook};
use gnwd_core::rand_util;
use gnwd_core::tensor::TensorF32;

pub struct OracleOutcome {
    pub lines: Vec<(String, bool)>,
}

impl OracleOutcome {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|(_, ok)| *ok)
    }
}

fn moments(samples: &[TensorF32]) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = samples.len() as f64;
    let mut mean = [0.0f64; 2];
    for s in samples {
        for k in 0..2 {
            mean[k] += s.data()[k] as f64 / n;
        }
    }
    let mut cov = [[0.0f64; 2]; 2];
    for s in samples {
        let d = [s.data()[0] as f64 - mean[0], s.data()[1] as f64 - mean[1]];
        for a in 0..2 {
            for b in 0..2 {
                cov[a][b] += d[a] * d[b] / (n - 1.0);
            }
        }
    }
    (mean, cov)
}

pub fn run(cfg: &PipelineConfig) -> Result<OracleOutcome> {
    // a corrupt pipeline schedule must fail loudly here, not at train time
    cfg.diffusion.schedule()?;
    let o = &cfg.oracle;
    let sched = o.schedule()?;

    let data = GaussianConjugateDenoiser::new(
        vec![o.mean[0], o.mean[1]],
        vec![o.var[0], 0.0, 0.0, o.var[1]],
    )?;
    let model = data.with_schedule(&sched);
    let z_shape = [1usize, 1, 1, 2];
    let seeds: Vec<u64> = (0..o.chains)
        .map(|i| rand_util::derive_seed(0xABCD_EF00, i as u64))
        .collect();

    let mut lines = Vec::new();

    // unguided arm: distributional correctness
    let unguided = sample_ensemble(None, &z_shape, &model, &sched, &seeds, None)?;
    let (mean, cov) = moments(&unguided);
    let mean_err = (mean[0] - o.mean[0]).abs().max((mean[1] - o.mean[1]).abs());
    let true_cov = [[o.var[0], 0.0], [0.0, o.var[1]]];
    let mut num = 0.0;
    let mut den = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            num += (cov[a][b] - true_cov[a][b]).powi(2);
            den += true_cov[a][b].powi(2);
        }
    }
    let cov_err = (num / den).sqrt();
    lines.push((
        format!(
            "sampler mean within {:.3}: max |err| = {:.4} (mean [{:.4}, {:.4}])",
            o.mean_tol, mean_err, mean[0], mean[1]
        ),
        mean_err <= o.mean_tol,
    ));
    lines.push((
        format!(
            "sampler covariance within {:.0}%: rel Frobenius err = {:.4}",
            o.cov_tol * 100.0,
            cov_err
        ),
        cov_err <= o.cov_tol,
    ));

    // guided arm: linear probe on the first coordinate, target at the true
    // mean, so the violation should shrink while the other coordinate keeps
    // its spread
    let codec_spec = CodecSpec::identity(1, 1, 2);
    let probe = TensorF32::new(vec![1, 1, 1, 2], vec![1.0, 0.0])?;
    let f0 = o.mean[0];
    let hook = OracleGuidance {
        model: &model,
        codec_spec: &codec_spec,
        sched: &sched,
        constraint: PixelConstraint::LinearProbe { probe: probe.clone() },
        f0,
        z_cond: None,
        cfg: GuidanceConfig {
            lambda: o.lambda,
            grad_clip: None,
        },
    };
    let guided = sample_ensemble(None, &z_shape, &model, &sched, &seeds, Some(&hook))?;

    let violation = |samples: &[TensorF32]| -> f64 {
        samples
            .iter()
            .map(|s| (s.data()[0] as f64 - f0).abs())
            .sum::<f64>()
            / samples.len() as f64
    };
    let v_unguided = violation(&unguided);
    let v_guided = violation(&guided);
    let ratio = v_guided / v_unguided.max(1e-12);
    lines.push((
        format!(
            "guided violation ratio <= {:.2}: {:.4} ({:.4} vs {:.4}, lambda {})",
            o.violation_ratio_max, ratio, v_guided, v_unguided, o.lambda
        ),
        ratio <= o.violation_ratio_max,
    ));

    let (_, cov_guided) = moments(&guided);
    let drift = (cov_guided[1][1] - o.var[1]).abs() / o.var[1];
    lines.push((
        format!(
            "unconstrained coordinate variance drift <= {:.0}%: {:.4} (var {:.4} vs {:.4})",
            o.cov_drift_max * 100.0,
            drift,
            cov_guided[1][1],
            o.var[1]
        ),
        drift <= o.cov_drift_max,
    ));

    // lambda = 0 must reproduce the unguided stream bit-exactly
    let null_hook = OracleGuidance {
        model: &model,
        codec_spec: &codec_spec,
        sched: &sched,
        constraint: PixelConstraint::LinearProbe { probe },
        f0,
        z_cond: None,
        cfg: GuidanceConfig {
            lambda: 0.0,
            grad_clip: None,
        },
    };
    let subset = &seeds[..seeds.len().min(64)];
    let null_arm = sample_ensemble(
        None,
        &z_shape,
        &model,
        &sched,
        subset,
        Some(&null_hook as &(dyn GuidanceHook + Sync)),
    )?;
    let bitexact = null_arm
        .iter()
        .zip(&unguided[..subset.len()])
        .all(|(a, b)| a.data() == b.data());
    lines.push((
        "lambda = 0 reproduces the unguided stream bit-exactly".to_string(),
        bitexact,
    ));

    Ok(OracleOutcome { lines })
}

pub fn print_outcome(outcome: &OracleOutcome) {
    for (line, ok) in &outcome.lines {
        println!("{} {}", if *ok { "PASS" } else { "FAIL" }, line);
    }
}
