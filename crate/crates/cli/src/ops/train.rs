//! Denoiser training: noise-matching objective over the generated corpus.

use std::path::PathBuf;

use anyhow::{Context, Result};
use gnwd_core::config::PipelineConfig;
use gnwd_core::data_store::{read_checkpoint, write_checkpoint};
use gnwd_core::denoiser::{DenoiserNet, DenoiserSpec};
use gnwd_core::diffusion::training_loss;
use gnwd_core::nn::{AdamConfig, AdamState};
use gnwd_core::rand_util;
use gnwd_core::tensor::TensorF32;

use super::{open_dataset, prepare_dir, read_batch, write_loss_csv, RunPaths};

pub fn denoiser_spec(cfg: &PipelineConfig, l_in: usize, l_out: usize) -> Result<DenoiserSpec> {
    let latent = super::latent_dims(cfg)?;
    Ok(DenoiserSpec {
        l_in,
        l_out,
        hz: latent.0,
        wz: latent.1,
        cz: latent.2,
        width: cfg.denoiser.width,
        mid_width: cfg.denoiser.mid_width,
        temb_dim: cfg.denoiser.temb_dim,
        temb_hidden: cfg.denoiser.temb_hidden,
    })
}

pub fn adam_config(lr: f64, weight_decay: f64, grad_clip: f64) -> AdamConfig {
    AdamConfig {
        lr,
        weight_decay,
        grad_clip: (grad_clip > 0.0).then_some(grad_clip),
        ..AdamConfig::default()
    }
}

/// Loads a denoiser checkpoint written by `run`, returning the net and the
/// stored step counter.
pub fn load_denoiser(path: &std::path::Path, spec: DenoiserSpec) -> Result<(DenoiserNet<f32>, u64)> {
    let entries = read_checkpoint(path).with_context(|| format!("reading checkpoint {path:?}"))?;
    let mut net = DenoiserNet::<f32>::init(0, spec)?;
    net.load_named_tensors(&entries)?;
    let step = entries
        .iter()
        .find(|(name, _)| name == "__step")
        .map(|(_, t)| t.data()[0] as u64)
        .unwrap_or(0);
    Ok((net, step))
}

pub fn run(cfg: &PipelineConfig, resume: bool) -> Result<PathBuf> {
    let paths = RunPaths::new(cfg);
    let mut reader = open_dataset(&paths.train_manifest())?;
    let manifest = reader.manifest().clone();
    anyhow::ensure!(manifest.count > 0, "training dataset is empty");
    prepare_dir(&paths.train_dir(), cfg)?;

    let codec = cfg
        .codec
        .spec_for(manifest.height, manifest.width, manifest.channels)?;
    let sched = cfg.diffusion.schedule()?;
    let spec = denoiser_spec(cfg, manifest.l_in, manifest.l_out)?;

    let checkpoint_path = paths.denoiser_checkpoint();
    let (mut net, start_step) = if resume && checkpoint_path.exists() {
        let (net, step) = load_denoiser(&checkpoint_path, spec)?;
        println!("resuming from step {step}");
        (net, step)
    } else {
        (
            DenoiserNet::<f32>::init(rand_util::derive_seed(cfg.run.seed, 10), spec)?,
            0,
        )
    };
    // a resumed run restarts optimizer moments; the step counter stays
    // monotone across the checkpoint
    let mut opt = AdamState::new(net.num_params());
    let adam = adam_config(cfg.denoiser.lr, cfg.denoiser.weight_decay, cfg.denoiser.grad_clip);

    let mut rows: Vec<(u64, usize, f64)> = Vec::new();
    let mut step = start_step;
    for epoch in 0..cfg.denoiser.epochs {
        let batches = gnwd_core::data_store::batch_iter(
            manifest.count,
            cfg.denoiser.batch_size,
            rand_util::derive_seed(cfg.run.seed, 20_000 + epoch as u64),
        )?;
        for batch in batches {
            let samples = read_batch(&mut reader, &batch)?;
            let pairs: Vec<(&TensorF32, &TensorF32)> =
                samples.iter().map(|s| (&s.target, &s.context)).collect();
            let mut rng =
                rand_util::rng_from_seed(rand_util::derive_seed(cfg.run.seed, 30_000 + step));
            let (loss, grads) = training_loss(&pairs, &net, &codec, &sched, &mut rng)?;
            opt.step(&mut net.params, &grads, &adam)?;
            step += 1;
            rows.push((step, epoch, loss));
        }
        let epoch_loss: f64 = rows
            .iter()
            .filter(|(_, e, _)| *e == epoch)
            .map(|(_, _, l)| l)
            .sum::<f64>()
            / rows.iter().filter(|(_, e, _)| *e == epoch).count().max(1) as f64;
        println!("epoch {epoch}: mean loss {epoch_loss:.5}");
    }

    let mut entries = net.named_tensors();
    entries.push((
        "__step".to_string(),
        TensorF32::new(vec![1], vec![step as f32])?,
    ));
    write_checkpoint(&checkpoint_path, &entries)?;
    write_loss_csv(&paths.train_dir().join("loss.csv"), &rows)?;
    println!("wrote {}", checkpoint_path.display());
    Ok(checkpoint_path)
}
