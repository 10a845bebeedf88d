//! Alignment training: the constraint regressor, and (for the energy
//! constraint) the frame-pair energy detector. Never touches denoiser
//! weights.

use std::path::Path;

use anyhow::{Context, Result};
use gnwd_core::alignment::{
    fit_intensity_forecaster, frame_intensities, train_alignment_step, AlignSpec, AlignmentNet,
    Constraint, EnergyDetector, EnergyNorm, IntensityForecaster,
};
use gnwd_core::config::PipelineConfig;
use gnwd_core::data_store::{read_checkpoint, write_checkpoint, DatasetReader};
use gnwd_core::nn::AdamState;
use gnwd_core::rand_util;
use gnwd_core::tensor::TensorF32;

use super::{frame_of, open_dataset, prepare_dir, read_batch, write_loss_csv, RunPaths};
use crate::ops::train::adam_config;

/// Cosine-decayed learning rate over the epoch schedule.
fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let progress = epoch as f64 / epochs.max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Pools every recorded trajectory energy in the corpus for normalization.
pub fn corpus_energy_norm(reader: &mut DatasetReader) -> Result<EnergyNorm> {
    let mut all = Vec::new();
    for i in 0..reader.len() {
        let sample = reader.read_sample(i)?;
        let meta = sample
            .meta
            .ok_or_else(|| anyhow::anyhow!("sample {i} has no trajectory meta"))?;
        all.extend(meta.energies.data().iter().map(|&e| e as f64));
    }
    Ok(EnergyNorm::from_energies(&all)?)
}

fn norm_entries(norm: EnergyNorm) -> Vec<(String, TensorF32)> {
    vec![
        (
            "__norm_mean".to_string(),
            TensorF32::new(vec![1], vec![norm.mean as f32]).expect("scalar tensor"),
        ),
        (
            "__norm_std".to_string(),
            TensorF32::new(vec![1], vec![norm.std as f32]).expect("scalar tensor"),
        ),
    ]
}

pub fn norm_from_entries(entries: &[(String, TensorF32)]) -> EnergyNorm {
    let find = |name: &str, default: f64| {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.data()[0] as f64)
            .unwrap_or(default)
    };
    EnergyNorm {
        mean: find("__norm_mean", 0.0),
        std: find("__norm_std", 1.0),
    }
}

pub fn align_spec(cfg: &PipelineConfig, l_in: usize, l_out: usize, out_dim: usize) -> Result<AlignSpec> {
    let latent = super::latent_dims(cfg)?;
    Ok(AlignSpec {
        l_in,
        l_out,
        hz: latent.0,
        wz: latent.1,
        cz: latent.2,
        width: cfg.guidance.align_width,
        levels: cfg.guidance.align_levels,
        temb_dim: 16,
        temb_hidden: 32,
        out_dim,
    })
}

pub fn load_alignment(path: &Path, spec: AlignSpec) -> Result<(AlignmentNet<f32>, EnergyNorm)> {
    let entries = read_checkpoint(path).with_context(|| format!("reading checkpoint {path:?}"))?;
    let mut net = AlignmentNet::<f32>::init(0, spec)?;
    net.load_named_tensors(&entries)?;
    Ok((net, norm_from_entries(&entries)))
}

pub fn load_detector(path: &Path, cfg: &PipelineConfig) -> Result<EnergyDetector> {
    let entries = read_checkpoint(path).with_context(|| format!("reading checkpoint {path:?}"))?;
    let norm = norm_from_entries(&entries);
    let frame = (cfg.sim.sim.height, cfg.sim.sim.width, 1);
    let mut det = EnergyDetector::init(0, frame, cfg.guidance.detector_width, norm)?;
    det.net.load_named_tensors(&entries)?;
    Ok(det)
}

pub fn save_forecaster(path: &Path, fc: &IntensityForecaster) -> Result<()> {
    let entries = vec![
        (
            "weights".to_string(),
            TensorF32::new(
                vec![fc.weights.len()],
                fc.weights.iter().map(|&w| w as f32).collect(),
            )?,
        ),
        (
            "sigma".to_string(),
            TensorF32::new(vec![1], vec![fc.sigma as f32])?,
        ),
    ];
    write_checkpoint(path, &entries)?;
    Ok(())
}

pub fn load_forecaster(path: &Path) -> Result<IntensityForecaster> {
    let entries = read_checkpoint(path)?;
    let weights = entries
        .iter()
        .find(|(n, _)| n == "weights")
        .ok_or_else(|| anyhow::anyhow!("forecaster checkpoint missing weights"))?;
    let sigma = entries
        .iter()
        .find(|(n, _)| n == "sigma")
        .ok_or_else(|| anyhow::anyhow!("forecaster checkpoint missing sigma"))?;
    Ok(IntensityForecaster {
        weights: weights.1.data().iter().map(|&w| w as f64).collect(),
        sigma: sigma.1.data()[0] as f64,
    })
}

pub fn run(cfg: &PipelineConfig) -> Result<()> {
    let paths = RunPaths::new(cfg);
    let mut reader = open_dataset(&paths.train_manifest())?;
    let manifest = reader.manifest().clone();
    anyhow::ensure!(manifest.count > 0, "training dataset is empty");
    prepare_dir(&paths.align_dir(), cfg)?;

    let codec = cfg
        .codec
        .spec_for(manifest.height, manifest.width, manifest.channels)?;
    let sched = cfg.diffusion.schedule()?;

    match cfg.guidance.kind.as_str() {
        "energy" => {
            let norm = corpus_energy_norm(&mut reader)?;
            println!("energy norm: mean {:.4}, std {:.4}", norm.mean, norm.std);
            let constraint = Constraint::EnergySequence {
                l_out: manifest.l_out,
                norm,
            };

            // constraint regressor
            let spec = align_spec(cfg, manifest.l_in, manifest.l_out, manifest.l_out)?;
            let mut net =
                AlignmentNet::<f32>::init(rand_util::derive_seed(cfg.run.seed, 40), spec)?;
            let mut opt = AdamState::new(net.num_params());
            let mut rows = Vec::new();
            let mut step = 0u64;
            for epoch in 0..cfg.guidance.align_epochs {
                let adam = adam_config(
                    cosine_lr(cfg.guidance.align_lr, epoch, cfg.guidance.align_epochs),
                    0.0,
                    cfg.denoiser.grad_clip,
                );
                let batches = gnwd_core::data_store::batch_iter(
                    manifest.count,
                    cfg.guidance.align_batch,
                    rand_util::derive_seed(cfg.run.seed, 41_000 + epoch as u64),
                )?;
                for batch in batches {
                    use rayon::prelude::*;
                    let samples = read_batch(&mut reader, &batch)?;
                    let per: Vec<(f64, Vec<f32>)> = samples
                        .par_iter()
                        .enumerate()
                        .map(|(k, sample)| -> anyhow::Result<(f64, Vec<f32>)> {
                            let mut rng = rand_util::rng_from_seed(rand_util::derive_seed(
                                cfg.run.seed,
                                42_000_000 + step * 4096 + k as u64,
                            ));
                            let f = constraint.value_for_sample(sample, manifest.l_in)?;
                            Ok(train_alignment_step(
                                &net,
                                &sample.target,
                                &sample.context,
                                &f,
                                &codec,
                                &sched,
                                &mut rng,
                            )?)
                        })
                        .collect::<anyhow::Result<_>>()?;
                    let mut grads = vec![0.0f32; net.num_params()];
                    let mut loss = 0.0;
                    for (l, g) in &per {
                        loss += l / per.len() as f64;
                        for (acc, gv) in grads.iter_mut().zip(g) {
                            *acc += gv / per.len() as f32;
                        }
                    }
                    opt.step(&mut net.params, &grads, &adam)?;
                    step += 1;
                    rows.push((step, epoch, loss));
                }
                let last = rows.last().map(|r| r.2).unwrap_or(0.0);
                println!("alignment epoch {epoch}: loss {last:.5}");
            }
            let mut entries = net.named_tensors();
            entries.extend(norm_entries(norm));
            write_checkpoint(&paths.align_checkpoint(), &entries)?;
            write_loss_csv(&paths.align_dir().join("align_loss.csv"), &rows)?;

            // frame-pair energy detector for pixel-space evaluation
            let mut det = EnergyDetector::init(
                rand_util::derive_seed(cfg.run.seed, 43),
                (manifest.height, manifest.width, manifest.channels),
                cfg.guidance.detector_width,
                norm,
            )?;
            let mut det_opt = AdamState::new(det.net.num_params());
            let mut det_rows = Vec::new();
            let mut det_step = 0u64;
            for epoch in 0..cfg.guidance.align_epochs {
                let adam = adam_config(
                    cosine_lr(cfg.guidance.align_lr, epoch, cfg.guidance.align_epochs),
                    0.0,
                    cfg.denoiser.grad_clip,
                );
                let batches = gnwd_core::data_store::batch_iter(
                    manifest.count,
                    cfg.guidance.align_batch,
                    rand_util::derive_seed(cfg.run.seed, 44_000 + epoch as u64),
                )?;
                for batch in batches {
                    use rayon::prelude::*;
                    let samples = read_batch(&mut reader, &batch)?;
                    let per: Vec<(f64, Vec<f32>)> = samples
                        .par_iter()
                        .enumerate()
                        .map(|(k, sample)| -> anyhow::Result<(f64, Vec<f32>)> {
                            use rand::Rng;
                            let mut rng = rand_util::rng_from_seed(rand_util::derive_seed(
                                cfg.run.seed,
                                45_000_000 + det_step * 4096 + k as u64,
                            ));
                            let meta = sample.meta.as_ref().expect("meta checked above");
                            let j = rng.gen_range(0..manifest.l_out);
                            let prev = if j == 0 {
                                frame_of(&sample.context, manifest.l_in - 1)
                            } else {
                                frame_of(&sample.target, j - 1)
                            };
                            let cur = frame_of(&sample.target, j);
                            let e_raw = meta.energies.data()[manifest.l_in + j] as f64;
                            Ok(det.train_step(&prev, &cur, e_raw)?)
                        })
                        .collect::<anyhow::Result<_>>()?;
                    let mut grads = vec![0.0f32; det.net.num_params()];
                    let mut loss = 0.0;
                    for (l, g) in &per {
                        loss += l / per.len() as f64;
                        for (acc, gv) in grads.iter_mut().zip(g) {
                            *acc += gv / per.len() as f32;
                        }
                    }
                    det_opt.step(&mut det.net.params, &grads, &adam)?;
                    det_step += 1;
                    det_rows.push((det_step, epoch, loss));
                }
                let last = det_rows.last().map(|r| r.2).unwrap_or(0.0);
                println!("detector epoch {epoch}: loss {last:.5}");
            }
            let mut entries = det.net.named_tensors();
            entries.extend(norm_entries(norm));
            write_checkpoint(&paths.detector_checkpoint(), &entries)?;
            write_loss_csv(&paths.align_dir().join("detector_loss.csv"), &det_rows)?;
            println!("wrote {}", paths.align_checkpoint().display());
            Ok(())
        }
        "intensity" => {
            // Gaussian forecaster of the sequence intensity
            let mut features = Vec::new();
            let mut targets = Vec::new();
            for i in 0..reader.len() {
                let sample = reader.read_sample(i)?;
                features.push(frame_intensities(&sample.context));
                targets.push(sample.target.mean());
            }
            let fc = fit_intensity_forecaster(&features, &targets)?;
            println!(
                "intensity forecaster: sigma {:.6}, {} weights",
                fc.sigma,
                fc.weights.len()
            );
            save_forecaster(&paths.forecaster_checkpoint(), &fc)?;

            // constraint regressor on the sequence intensity
            let spec = align_spec(cfg, manifest.l_in, manifest.l_out, 1)?;
            let mut net =
                AlignmentNet::<f32>::init(rand_util::derive_seed(cfg.run.seed, 46), spec)?;
            let mut opt = AdamState::new(net.num_params());
            let mut rows = Vec::new();
            let mut step = 0u64;
            for epoch in 0..cfg.guidance.align_epochs {
                let adam = adam_config(
                    cosine_lr(cfg.guidance.align_lr, epoch, cfg.guidance.align_epochs),
                    0.0,
                    cfg.denoiser.grad_clip,
                );
                let batches = gnwd_core::data_store::batch_iter(
                    manifest.count,
                    cfg.guidance.align_batch,
                    rand_util::derive_seed(cfg.run.seed, 47_000 + epoch as u64),
                )?;
                for batch in batches {
                    use rayon::prelude::*;
                    let samples = read_batch(&mut reader, &batch)?;
                    let per: Vec<(f64, Vec<f32>)> = samples
                        .par_iter()
                        .enumerate()
                        .map(|(k, sample)| -> anyhow::Result<(f64, Vec<f32>)> {
                            let mut rng = rand_util::rng_from_seed(rand_util::derive_seed(
                                cfg.run.seed,
                                48_000_000 + step * 4096 + k as u64,
                            ));
                            let f = vec![sample.target.mean()];
                            Ok(train_alignment_step(
                                &net,
                                &sample.target,
                                &sample.context,
                                &f,
                                &codec,
                                &sched,
                                &mut rng,
                            )?)
                        })
                        .collect::<anyhow::Result<_>>()?;
                    let mut grads = vec![0.0f32; net.num_params()];
                    let mut loss = 0.0;
                    for (l, g) in &per {
                        loss += l / per.len() as f64;
                        for (acc, gv) in grads.iter_mut().zip(g) {
                            *acc += gv / per.len() as f32;
                        }
                    }
                    opt.step(&mut net.params, &grads, &adam)?;
                    step += 1;
                    rows.push((step, epoch, loss));
                }
            }
            write_checkpoint(&paths.align_checkpoint(), &net.named_tensors())?;
            write_loss_csv(&paths.align_dir().join("align_loss.csv"), &rows)?;
            println!("wrote {}", paths.align_checkpoint().display());
            Ok(())
        }
        other => anyhow::bail!("guidance kind `{other}` has no trainable alignment (use energy|intensity)"),
    }
}
