//! Guided / unguided ensemble sampling over the test split.

use std::path::PathBuf;

use anyhow::{Context, Result};
use gnwd_core::alignment::{frame_intensities, AlignedGuidance, OracleGuidance, PixelConstraint};
use gnwd_core::codec;
use gnwd_core::config::{PipelineConfig, TextDoc};
use gnwd_core::data_store::write_tensor_file;
use gnwd_core::diffusion::{sample_ensemble, GuidanceHook};
use gnwd_core::rand_util;
use gnwd_core::tensor::TensorF32;

use super::{open_dataset, prepare_dir, RunPaths};
use crate::pgm;

pub fn run(cfg: &PipelineConfig) -> Result<PathBuf> {
    let paths = RunPaths::new(cfg);
    let mut reader = open_dataset(&paths.test_manifest())?;
    let manifest = reader.manifest().clone();
    anyhow::ensure!(manifest.count > 0, "test dataset is empty");
    let out_dir = paths.samples_dir();
    prepare_dir(&out_dir, cfg)?;

    let codec_spec = cfg
        .codec
        .spec_for(manifest.height, manifest.width, manifest.channels)?;
    let sched = cfg.diffusion.schedule()?;
    let spec = super::train::denoiser_spec(cfg, manifest.l_in, manifest.l_out)?;
    let z_shape = spec.z_shape();
    let (net, _) = super::train::load_denoiser(&paths.denoiser_checkpoint(), spec)
        .context("denoiser checkpoint missing; run `train` first")?;

    let guided = cfg.guidance.lambda > 0.0 && cfg.guidance.kind != "none";
    let gconf = cfg.guidance.guidance_config()?;

    // guidance resources, loaded once
    let align = if guided && cfg.guidance.path == "aligned" {
        let out_dim = match cfg.guidance.kind.as_str() {
            "energy" => manifest.l_out,
            "intensity" => 1,
            other => anyhow::bail!("guidance kind `{other}` is not samplable"),
        };
        let spec = super::train_align::align_spec(cfg, manifest.l_in, manifest.l_out, out_dim)?;
        Some(super::train_align::load_alignment(
            &paths.align_checkpoint(),
            spec,
        )?)
    } else {
        None
    };
    let forecaster = if guided && cfg.guidance.kind == "intensity" {
        Some(super::train_align::load_forecaster(
            &paths.forecaster_checkpoint(),
        )?)
    } else {
        None
    };
    if guided && cfg.guidance.kind == "energy" && cfg.guidance.path != "aligned" {
        anyhow::bail!("the energy constraint guides through the trained alignment network only");
    }

    let count = if cfg.eval.eval_count == 0 {
        manifest.count
    } else {
        cfg.eval.eval_count.min(manifest.count)
    };
    let members = cfg.eval.ensemble.max(1);

    for idx in 0..count {
        let sample = reader.read_sample(idx)?;
        let z_cond = codec::encode_seq(&sample.context, &codec_spec)?;

        // per-sample guidance target
        let aligned_hook: Option<AlignedGuidance> = match (&align, cfg.guidance.kind.as_str()) {
            (Some((net, norm)), "energy") if guided => {
                let meta = sample
                    .meta
                    .as_ref()
                    .ok_or_else(|| anyhow::anyhow!("sample {idx} lacks energy meta"))?;
                let e0 = meta.energies.data()[manifest.l_in - 1] as f64;
                Some(AlignedGuidance {
                    net,
                    z_cond: z_cond.clone(),
                    f0: vec![norm.normalize(e0); manifest.l_out],
                    cfg: gconf.clone(),
                })
            }
            (Some((net, _)), "intensity") if guided => {
                let fc = forecaster.as_ref().expect("loaded above");
                let f0 = fc.anticipated_target(
                    &frame_intensities(&sample.context),
                    cfg.guidance.n_sigma,
                )?;
                Some(AlignedGuidance {
                    net,
                    z_cond: z_cond.clone(),
                    f0: vec![f0],
                    cfg: gconf.clone(),
                })
            }
            _ => None,
        };
        let oracle_hook: Option<OracleGuidance> =
            if guided && cfg.guidance.kind == "intensity" && cfg.guidance.path == "oracle" {
                let fc = forecaster.as_ref().expect("loaded above");
                let f0 = fc.anticipated_target(
                    &frame_intensities(&sample.context),
                    cfg.guidance.n_sigma,
                )?;
                Some(OracleGuidance {
                    model: &net,
                    codec_spec: &codec_spec,
                    sched: &sched,
                    constraint: PixelConstraint::MeanIntensity,
                    f0,
                    z_cond: Some(z_cond.clone()),
                    cfg: gconf.clone(),
                })
            } else {
                None
            };
        let hook: Option<&(dyn GuidanceHook + Sync)> = match (&aligned_hook, &oracle_hook) {
            (Some(h), _) => Some(h),
            (_, Some(h)) => Some(h),
            _ => None,
        };

        let seeds: Vec<u64> = (0..members)
            .map(|m| rand_util::derive_seed(cfg.run.seed, 0x5A00_0000 + (idx * 1024 + m) as u64))
            .collect();
        let latents = sample_ensemble(Some(&z_cond), &z_shape, &net, &sched, &seeds, hook)?;

        // decode to pixel space, clamped to the frame value range
        let mut stacked = Vec::with_capacity(members * sample.target.len());
        let mut decoded_members = Vec::with_capacity(members);
        for latent in &latents {
            let pixels = codec::decode_seq(latent, &codec_spec)?.map(|v| v.clamp(0.0, 1.0));
            stacked.extend_from_slice(pixels.data());
            decoded_members.push(pixels);
        }
        let stack = TensorF32::new(
            vec![
                members,
                manifest.l_out,
                manifest.height,
                manifest.width,
                manifest.channels,
            ],
            stacked,
        )?;
        write_tensor_file(&out_dir.join(format!("sample_{idx:04}.gnwd")), &stack)?;

        if idx < cfg.eval.previews {
            write_previews(cfg, &out_dir, idx, &sample, &decoded_members)?;
        }
    }

    let mut doc = TextDoc::new();
    doc.set("predictions", "count", count);
    doc.set("predictions", "ensemble", members);
    doc.set("predictions", "l_out", manifest.l_out);
    doc.set("predictions", "height", manifest.height);
    doc.set("predictions", "width", manifest.width);
    doc.set("predictions", "channels", manifest.channels);
    doc.set("predictions", "guided", if hook_active(cfg) { "true" } else { "false" });
    doc.save(&out_dir.join("predictions.manifest"))?;
    println!("wrote {count} prediction stacks to {}", out_dir.display());
    Ok(out_dir)
}

fn hook_active(cfg: &PipelineConfig) -> bool {
    cfg.guidance.lambda > 0.0 && cfg.guidance.kind != "none"
}

fn write_previews(
    cfg: &PipelineConfig,
    out_dir: &std::path::Path,
    idx: usize,
    sample: &gnwd_core::data_store::SequenceSample,
    members: &[TensorF32],
) -> Result<()> {
    let mut strips = vec![
        ("context", sample.context.clone()),
        ("target", sample.target.clone()),
    ];
    for (m, member) in members.iter().take(2).enumerate() {
        strips.push((
            if m == 0 { "member0" } else { "member1" },
            member.clone(),
        ));
    }
    for (name, seq) in strips {
        let (plane, h, w) = pgm::film_strip(&seq)?;
        let base = out_dir.join(format!("sample_{idx:04}_{name}"));
        pgm::write_pgm(&base.with_extension("pgm"), &plane, h, w)?;
        if cfg.eval.png {
            pgm::write_png(&base.with_extension("png"), &plane, h, w)?;
        }
    }
    Ok(())
}
