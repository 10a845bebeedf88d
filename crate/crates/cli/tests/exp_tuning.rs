//! Scratch tuning harness (temporary).
#![allow(clippy::all)]

use std::path::PathBuf;

use gnwd_cli::ops::{self, evaluate, gen_nbody, sample, train, train_align};
use gnwd_core::config::PipelineConfig;

fn toy_config(out: &str) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.run.seed = 11;
    cfg.run.output_dir = out.to_string();
    cfg.sim.sim.height = 32;
    cfg.sim.sim.width = 32;
    cfg.sim.sim.margin = 7.0;
    cfg.sim.sim.d_ref = (2.0f64 * 32.0 * 32.0).sqrt();
    cfg.sim.sprite_size = 10;
    cfg.sim.min_separation = 10.0;
    cfg.sim.sim.speed_min = 0.5;
    cfg.sim.sim.speed_max = 3.0;
    cfg.sim.count_train = 2000;
    cfg.sim.count_test = 50;
    cfg.sim.l_in = 10;
    cfg.sim.l_out = 10;
    cfg.denoiser.epochs = 12;
    cfg.denoiser.batch_size = 16;
    cfg.guidance.kind = "energy".to_string();
    cfg.guidance.align_epochs = 8;
    cfg.guidance.align_width = 32;
    cfg.guidance.detector_width = 16;
    cfg.eval.ensemble = 8;
    cfg.eval.eval_count = 50;
    cfg.eval.previews = 2;
    cfg
}

#[test]
#[ignore]
fn build_fixture() {
    let cfg = toy_config("/tmp/gnwd_tune");
    let t0 = std::time::Instant::now();
    if !PathBuf::from("/tmp/gnwd_tune/data/train.manifest").exists() {
        gen_nbody::run(&cfg).unwrap();
        eprintln!("gen: {:.1}s", t0.elapsed().as_secs_f64());
    }
    let t0 = std::time::Instant::now();
    if !PathBuf::from("/tmp/gnwd_tune/train/denoiser.gnwp").exists() {
        train::run(&cfg, false).unwrap();
        eprintln!("train: {:.1}s", t0.elapsed().as_secs_f64());
    }
    let t0 = std::time::Instant::now();
    if !PathBuf::from("/tmp/gnwd_tune/align/align.gnwp").exists() {
        train_align::run(&cfg).unwrap();
        eprintln!("train-align: {:.1}s", t0.elapsed().as_secs_f64());
    }
}

#[test]
#[ignore]
fn probe_energy_lambda() {
    let lambda: f64 = std::env::var("LAM").ok().and_then(|v| v.parse().ok()).unwrap_or(50.0);
    let count: usize = std::env::var("CNT").ok().and_then(|v| v.parse().ok()).unwrap_or(10);
    let mut cfg = toy_config("/tmp/gnwd_tune");
    cfg.eval.eval_count = count;

    // unguided
    cfg.guidance.lambda = 0.0;
    cfg.run.output_dir = "/tmp/gnwd_tune_u".to_string();
    link_shared(&cfg);
    let t0 = std::time::Instant::now();
    sample::run(&cfg).unwrap();
    eprintln!("unguided sampling {count}: {:.1}s", t0.elapsed().as_secs_f64());
    evaluate::run(&cfg, None).unwrap();
    let e_unguided = read_emae("/tmp/gnwd_tune_u/eval/metrics.csv");

    // guided
    cfg.guidance.lambda = lambda;
    cfg.run.output_dir = "/tmp/gnwd_tune_g".to_string();
    link_shared(&cfg);
    let t0 = std::time::Instant::now();
    sample::run(&cfg).unwrap();
    eprintln!("guided sampling {count}: {:.1}s", t0.elapsed().as_secs_f64());
    evaluate::run(&cfg, None).unwrap();
    let e_guided = read_emae("/tmp/gnwd_tune_g/eval/metrics.csv");

    eprintln!(
        "lambda {lambda}: E.MAE unguided {e_unguided:.4} guided {e_guided:.4} ratio {:.3}",
        e_guided / e_unguided
    );
}

fn link_shared(cfg: &PipelineConfig) {
    // share data + checkpoints across probe dirs
    let root = PathBuf::from(&cfg.run.output_dir);
    std::fs::create_dir_all(&root).unwrap();
    for sub in ["data", "train", "align"] {
        let dst = root.join(sub);
        if !dst.exists() {
            std::os::unix::fs::symlink(format!("/tmp/gnwd_tune/{sub}"), &dst).unwrap();
        }
    }
}

fn read_emae(path: &str) -> f64 {
    let csv = std::fs::read_to_string(path).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let i = header.iter().position(|c| *c == "e_mae").unwrap();
    row[i].parse().unwrap()
}

#[test]
#[ignore]
fn probe_intensity_lambda() {
    use gnwd_core::alignment::frame_intensities;
    let lambda: f64 = std::env::var("LAM").ok().and_then(|v| v.parse().ok()).unwrap_or(200.0);
    let contexts: usize = std::env::var("CNT").ok().and_then(|v| v.parse().ok()).unwrap_or(8);
    let mut cfg = toy_config("/tmp/gnwd_tune_i");
    link_shared(&cfg);
    cfg.guidance.kind = "intensity".to_string();
    cfg.guidance.path = "oracle".to_string();
    cfg.guidance.lambda = lambda;
    cfg.eval.eval_count = contexts;
    cfg.eval.ensemble = 8;

    // fit + save the forecaster from the shared corpus
    let paths = ops::RunPaths::new(&cfg);
    if !paths.forecaster_checkpoint().exists() {
        let mut reader = ops::open_dataset(&paths.train_manifest()).unwrap();
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for i in 0..reader.len() {
            let s = reader.read_sample(i).unwrap();
            features.push(frame_intensities(&s.context));
            targets.push(s.target.mean());
        }
        let fc = gnwd_core::alignment::fit_intensity_forecaster(&features, &targets).unwrap();
        eprintln!("forecaster sigma: {:.6}", fc.sigma);
        // align dir is a symlink to the shared one; write a local copy dir
        std::fs::remove_file(paths.root.join("align")).ok();
        std::fs::create_dir_all(paths.align_dir()).unwrap();
        train_align::save_forecaster(&paths.forecaster_checkpoint(), &fc).unwrap();
        // copy align+detector checkpoints for evaluate compat
        for f in ["align.gnwp", "edet.gnwp"] {
            std::fs::copy(format!("/tmp/gnwd_tune/align/{f}"), paths.align_dir().join(f)).ok();
        }
    }

    let mut mean_hi = 0.0;
    let mut mean_lo = 0.0;
    for (label, n) in [("hi", 2.0f64), ("lo", -2.0f64)] {
        cfg.guidance.n_sigma = n;
        cfg.run.output_dir = format!("/tmp/gnwd_tune_i/{label}");
        let root = PathBuf::from(&cfg.run.output_dir);
        std::fs::create_dir_all(&root).unwrap();
        for sub in ["data", "train"] {
            let dst = root.join(sub);
            if !dst.exists() {
                std::os::unix::fs::symlink(format!("/tmp/gnwd_tune/{sub}"), &dst).unwrap();
            }
        }
        let dst = root.join("align");
        if !dst.exists() {
            std::os::unix::fs::symlink("/tmp/gnwd_tune_i/align", &dst).unwrap();
        }
        let dir = sample::run(&cfg).unwrap();
        let mut total = 0.0;
        for idx in 0..contexts {
            let stack =
                gnwd_core::data_store::read_tensor_file(&dir.join(format!("sample_{idx:04}.gnwd")))
                    .unwrap();
            total += stack.mean();
        }
        let m = total / contexts as f64;
        if label == "hi" {
            mean_hi = m;
        } else {
            mean_lo = m;
        }
    }
    eprintln!("lambda {lambda}: mean I hi {mean_hi:.5} lo {mean_lo:.5} delta {:.5}", mean_hi - mean_lo);
}

#[test]
#[ignore]
fn probe_detector_learning() {
    use gnwd_cli::ops;
    use gnwd_core::alignment::{EnergyDetector, EnergyNorm};
    use gnwd_core::nn::{AdamConfig, AdamState};
    use gnwd_core::rand_util;
    use rand::Rng;
    use rayon::prelude::*;

    let n_train: usize = std::env::var("NTRAIN").ok().and_then(|v| v.parse().ok()).unwrap_or(500);
    let epochs: usize = std::env::var("EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(30);
    let width: usize = std::env::var("WIDTH").ok().and_then(|v| v.parse().ok()).unwrap_or(24);
    let lr: f64 = std::env::var("LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let clip: f64 = std::env::var("CLIP").ok().and_then(|v| v.parse().ok()).unwrap_or(0.0);

    let cfg = toy_config("/tmp/gnwd_tune");
    let paths = ops::RunPaths::new(&cfg);
    let mut reader = ops::open_dataset(&paths.train_manifest()).unwrap();
    let manifest = reader.manifest().clone();
    // triples: (prev, cur, e_norm)
    let norm = {
        let mut all = Vec::new();
        for i in 0..n_train.min(reader.len()) {
            let s = reader.read_sample(i).unwrap();
            all.extend(s.meta.unwrap().energies.data().iter().map(|&e| e as f64));
        }
        EnergyNorm::from_energies(&all).unwrap()
    };
    eprintln!("norm mean {:.3} std {:.3}", norm.mean, norm.std);
    let mut triples = Vec::new();
    for i in 0..n_train.min(reader.len()) {
        let s = reader.read_sample(i).unwrap();
        let meta = s.meta.as_ref().unwrap();
        let l_total = manifest.l_in + manifest.l_out;
        let frame_at = |k: usize| {
            if k < manifest.l_in {
                ops::frame_of(&s.context, k)
            } else {
                ops::frame_of(&s.target, k - manifest.l_in)
            }
        };
        for k in 1..l_total {
            triples.push((frame_at(k - 1), frame_at(k), meta.energies.data()[k] as f64));
        }
    }
    // held-out from test split
    let mut test_reader = ops::open_dataset(&paths.test_manifest()).unwrap();
    let mut held = Vec::new();
    for i in 0..test_reader.len().min(30) {
        let s = test_reader.read_sample(i).unwrap();
        let meta = s.meta.as_ref().unwrap();
        for j in 0..manifest.l_out {
            let prev = if j == 0 {
                ops::frame_of(&s.context, manifest.l_in - 1)
            } else {
                ops::frame_of(&s.target, j - 1)
            };
            let cur = ops::frame_of(&s.target, j);
            held.push((prev, cur, meta.energies.data()[manifest.l_in + j] as f64));
        }
    }
    eprintln!("{} train triples, {} held-out", triples.len(), held.len());

    let latent_mode = std::env::var("LATENT").map(|v| v == "1").unwrap_or(false);
    let kept: usize = std::env::var("DETKEPT").ok().and_then(|v| v.parse().ok()).unwrap_or(3);
    let codec_spec = gnwd_core::codec::CodecSpec::patch_ortho(32, 32, 1, 4, kept);
    if latent_mode {
        let enc = |f: &gnwd_core::TensorF32| gnwd_core::codec::encode_frame(f, &codec_spec).unwrap();
        triples = triples.iter().map(|(p, c, e)| (enc(p), enc(c), *e)).collect();
        held = held.iter().map(|(p, c, e)| (enc(p), enc(c), *e)).collect();
    }
    let frame_dims = if latent_mode { codec_spec.latent_dims() } else { (32, 32, 1) };
    let mut det = EnergyDetector::init(5, frame_dims, width, norm).unwrap();
    let mut opt = AdamState::new(det.net.num_params());
    eprintln!("detector params: {} (latent={latent_mode})", det.net.num_params());
    let batch: usize = std::env::var("BATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(32);
    let mut rng = rand_util::rng_from_seed(1);
    for epoch in 0..epochs {
        let wd: f64 = std::env::var("WD").ok().and_then(|v| v.parse().ok()).unwrap_or(0.0);
        let adam = AdamConfig { lr: lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos()), grad_clip: (clip > 0.0).then_some(clip), weight_decay: wd, ..Default::default() };
        let mut order: Vec<usize> = (0..triples.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let per: Vec<(f64, Vec<f32>)> = chunk
                .par_iter()
                .map(|&i| {
                    let (p, c, e) = &triples[i];
                    det.train_step(p, c, *e).unwrap()
                })
                .collect();
            let mut grads = vec![0.0f32; det.net.num_params()];
            let mut loss = 0.0;
            for (l, g) in &per {
                loss += l / per.len() as f64;
                for (a, gv) in grads.iter_mut().zip(g) {
                    *a += gv / per.len() as f32;
                }
            }
            opt.step(&mut det.net.params, &grads, &adam).unwrap();
            epoch_loss += loss;
            batches += 1;
        }
        if epoch % 5 == 0 || epoch == epochs - 1 {
            let held_mse: f64 = held
                .par_iter()
                .map(|(p, c, e)| {
                    let est = det.estimate_pair_normalized(p, c).unwrap();
                    let r = est - det.norm.normalize(*e);
                    r * r
                })
                .sum::<f64>()
                / held.len() as f64;
            eprintln!(
                "epoch {epoch}: train MSE {:.4}, held-out MSE {held_mse:.4}",
                epoch_loss / batches as f64
            );
        }
    }
}

#[test]
#[ignore]
fn probe_detector_overfit_one_batch() {
    use gnwd_cli::ops;
    use gnwd_core::alignment::{EnergyDetector, EnergyNorm};
    use gnwd_core::nn::{AdamConfig, AdamState};

    let cfg = toy_config("/tmp/gnwd_tune");
    let paths = ops::RunPaths::new(&cfg);
    let mut reader = ops::open_dataset(&paths.train_manifest()).unwrap();
    let manifest = reader.manifest().clone();
    let mut triples = Vec::new();
    for i in 0..8 {
        let s = reader.read_sample(i).unwrap();
        let meta = s.meta.as_ref().unwrap();
        let prev = ops::frame_of(&s.context, manifest.l_in - 1);
        let cur = ops::frame_of(&s.target, 0);
        triples.push((prev, cur, meta.energies.data()[manifest.l_in] as f64));
    }
    let energies: Vec<f64> = triples.iter().map(|t| t.2).collect();
    eprintln!("raw energies: {energies:?}");
    let norm = EnergyNorm::from_energies(&energies).unwrap();
    let mut det = EnergyDetector::init(5, (32, 32, 1), 24, norm).unwrap();
    let mut opt = AdamState::new(det.net.num_params());
    let adam = AdamConfig::default();
    for step in 0..300 {
        let mut grads = vec![0.0f32; det.net.num_params()];
        let mut loss = 0.0;
        let mut outs = Vec::new();
        for (p, c, e) in &triples {
            let (l, g) = det.train_step(p, c, *e).unwrap();
            loss += l / triples.len() as f64;
            for (a, gv) in grads.iter_mut().zip(&g) {
                *a += gv / triples.len() as f32;
            }
            if step % 50 == 0 {
                outs.push(det.estimate_pair_normalized(p, c).unwrap());
            }
        }
        let gnorm: f64 = grads.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
        if step % 50 == 0 {
            eprintln!(
                "step {step}: loss {loss:.4}, |grad| {gnorm:.3e}, outs {:?}",
                outs.iter().map(|o| format!("{o:.3}")).collect::<Vec<_>>()
            );
        }
        opt.step(&mut det.net.params, &grads, &adam).unwrap();
    }
}
