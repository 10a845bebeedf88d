//! Metric evaluation of prediction stacks against the test split, with a
//! persistence reference row.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gnwd_core::config::{PipelineConfig, TextDoc};
use gnwd_core::data_store::read_tensor_file;
use gnwd_core::metrics::{EvalAccumulator, MetricsReport};
use gnwd_core::tensor::TensorF32;

use super::{frame_of, open_dataset, prepare_dir, RunPaths};

/// Splits a stacked `[M, L, H, W, C]` prediction tensor into members.
pub fn split_members(stack: &TensorF32) -> Result<Vec<TensorF32>> {
    anyhow::ensure!(
        stack.shape().len() == 5,
        "prediction stacks are [M, L, H, W, C], got {:?}",
        stack.shape()
    );
    let m = stack.shape()[0];
    let per = stack.len() / m;
    let shape = stack.shape()[1..].to_vec();
    Ok((0..m)
        .map(|i| {
            TensorF32::new(shape.clone(), stack.data()[i * per..(i + 1) * per].to_vec())
                .expect("member slice")
        })
        .collect::<Vec<_>>())
}

/// Repeats the last context frame as a single-member forecast.
pub fn persistence_member(context: &TensorF32, l_out: usize) -> TensorF32 {
    let last = frame_of(context, context.shape()[0] - 1);
    let mut data = Vec::with_capacity(l_out * last.len());
    for _ in 0..l_out {
        data.extend_from_slice(last.data());
    }
    let mut shape = vec![l_out];
    shape.extend_from_slice(last.shape());
    TensorF32::new(shape, data).expect("persistence stack")
}

pub fn run(cfg: &PipelineConfig, predictions: Option<&Path>) -> Result<PathBuf> {
    let paths = RunPaths::new(cfg);
    let pred_dir = predictions
        .map(Path::to_path_buf)
        .unwrap_or_else(|| paths.samples_dir());
    let pred_manifest = TextDoc::load(&pred_dir.join("predictions.manifest"))
        .context("predictions manifest missing; run `sample` first")?;
    let count = pred_manifest
        .get_usize("predictions", "count")?
        .unwrap_or(0);
    anyhow::ensure!(count > 0, "no predictions to evaluate");

    let mut reader = open_dataset(&paths.test_manifest())?;
    let manifest = reader.manifest().clone();
    anyhow::ensure!(
        count <= manifest.count,
        "{count} predictions but only {} test samples",
        manifest.count
    );
    let out_dir = paths.eval_dir();
    prepare_dir(&out_dir, cfg)?;

    let codec_spec = cfg
        .codec
        .spec_for(manifest.height, manifest.width, manifest.channels)?;
    let detector = {
        let path = paths.detector_checkpoint();
        if path.exists() {
            Some(super::train_align::load_detector(&path, cfg)?)
        } else {
            None
        }
    };

    let mut acc_model = EvalAccumulator::new();
    let mut acc_persist = EvalAccumulator::new();
    for idx in 0..count {
        let sample = reader.read_sample(idx)?;
        let stack = read_tensor_file(&pred_dir.join(format!("sample_{idx:04}.gnwd")))?;
        let members = split_members(&stack)?;
        anyhow::ensure!(
            members[0].shape() == sample.target.shape(),
            "prediction/target shape mismatch at sample {idx}"
        );

        let energies = match (&detector, &sample.meta) {
            (Some(det), Some(meta)) => {
                let e0 = meta.energies.data()[manifest.l_in - 1] as f64;
                let last_context = frame_of(&sample.context, manifest.l_in - 1);
                let per_member: Vec<Vec<f64>> = members
                    .iter()
                    .map(|m| det.estimate_sequence(m, &last_context))
                    .collect::<gnwd_core::Result<_>>()?;
                Some((per_member, e0))
            }
            _ => None,
        };
        match &energies {
            Some((per_member, e0)) => {
                acc_model.add_sample(&members, &sample.target, Some((per_member, *e0)))?
            }
            None => acc_model.add_sample(&members, &sample.target, None)?,
        }

        let persist = persistence_member(&sample.context, manifest.l_out);
        acc_persist.add_sample(std::slice::from_ref(&persist), &sample.target, None)?;
    }

    let model_report = acc_model.finish()?;
    let persist_report = acc_persist.finish()?;
    let mut csv = MetricsReport::csv_header();
    csv.push('\n');
    csv.push_str(&model_report.csv_row("model"));
    csv.push('\n');
    csv.push_str(&persist_report.csv_row("persistence"));
    csv.push('\n');
    let csv_path = out_dir.join("metrics.csv");
    std::fs::write(&csv_path, &csv)?;

    let mut summary = TextDoc::new();
    summary.set("metrics", "samples", count);
    summary.set("metrics", "mse", format!("{:.6}", model_report.mse));
    summary.set("metrics", "mae", format!("{:.6}", model_report.mae));
    summary.set("metrics", "ssim", format!("{:.6}", model_report.ssim));
    summary.set("metrics", "crps", format!("{:.6}", model_report.crps));
    summary.set("metrics", "csi_m", format!("{:.6}", model_report.csi_mean));
    if let Some(e_mae) = model_report.e_mae {
        summary.set("metrics", "e_mae", format!("{:.6}", e_mae));
        summary.set(
            "metrics",
            "e_mse",
            format!("{:.6}", model_report.e_mse.unwrap_or(0.0)),
        );
    }
    summary.save(&out_dir.join("summary.txt"))?;
    println!("wrote {}", csv_path.display());
    Ok(csv_path)
}
