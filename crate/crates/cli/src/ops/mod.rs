//! Pipeline orchestration: the operations behind each CLI subcommand,
//! callable directly from tests.

pub mod evaluate;
pub mod gen_nbody;
pub mod oracle_check;
pub mod sample;
pub mod train;
pub mod train_align;

use std::path::{Path, PathBuf};
use std::sync::Once;

use anyhow::{Context, Result};
use gnwd_core::config::PipelineConfig;
use gnwd_core::data_store::{self, DatasetManifest};
use gnwd_core::tensor::TensorF32;

/// Command-line overrides layered on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub ensemble: Option<usize>,
    pub lambda: Option<f64>,
    pub n_sigma: Option<f64>,
    pub out: Option<PathBuf>,
}

pub fn load_config(path: Option<&Path>, ov: &Overrides) -> Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {p:?}"))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = ov.seed {
        cfg.run.seed = seed;
    }
    if let Some(workers) = ov.workers {
        cfg.run.workers = workers;
    }
    if let Some(m) = ov.ensemble {
        cfg.eval.ensemble = m;
    }
    if let Some(l) = ov.lambda {
        cfg.guidance.lambda = l;
    }
    if let Some(n) = ov.n_sigma {
        cfg.guidance.n_sigma = n;
    }
    if let Some(out) = &ov.out {
        cfg.run.output_dir = out.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

static THREAD_POOL: Once = Once::new();

/// Configures the global worker pool once: `--workers`, else GNWD_THREADS,
/// else the runtime default. Single-worker mode pins every parallel region
/// to one thread.
pub fn init_workers(requested: usize) {
    THREAD_POOL.call_once(|| {
        let from_env = std::env::var("GNWD_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        let n = if requested > 0 { requested } else { from_env };
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    });
}

/// Fixed per-run directory layout under the configured output root.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &PipelineConfig) -> Self {
        RunPaths {
            root: PathBuf::from(&cfg.run.output_dir),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.data_dir().join("train.manifest")
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.data_dir().join("test.manifest")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn denoiser_checkpoint(&self) -> PathBuf {
        self.train_dir().join("denoiser.gnwp")
    }

    pub fn align_dir(&self) -> PathBuf {
        self.root.join("align")
    }

    pub fn align_checkpoint(&self) -> PathBuf {
        self.align_dir().join("align.gnwp")
    }

    pub fn detector_checkpoint(&self) -> PathBuf {
        self.align_dir().join("edet.gnwp")
    }

    pub fn forecaster_checkpoint(&self) -> PathBuf {
        self.align_dir().join("forecaster.gnwp")
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// Creates `dir` and records the fully resolved config beside the outputs.
pub fn prepare_dir(dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("create {dir:?}"))?;
    cfg.to_doc()
        .save(&dir.join("config.resolved"))
        .context("write config snapshot")?;
    Ok(())
}

/// Sprite pool from the configured IDX file, or the builtin glyphs.
pub fn sprite_pool(cfg: &PipelineConfig) -> Result<Vec<TensorF32>> {
    match &cfg.sim.idx_images {
        Some(path) => {
            let stack = data_store::read_idx(Path::new(path))
                .with_context(|| format!("reading IDX sprites from {path}"))?;
            anyhow::ensure!(
                stack.shape().len() == 3,
                "IDX sprite file must be [count, h, w], got {:?}",
                stack.shape()
            );
            let (n, h, w) = (stack.shape()[0], stack.shape()[1], stack.shape()[2]);
            let per = h * w;
            // cap the pool; a few hundred sprites are plenty for rendering
            let keep = n.min(512);
            Ok((0..keep)
                .map(|i| {
                    TensorF32::new(
                        vec![h, w],
                        stack.data()[i * per..(i + 1) * per].to_vec(),
                    )
                    .expect("sprite slice")
                })
                .collect())
        }
        None => Ok(gnwd_core::nbody::builtin_digit_sprites(28)),
    }
}

pub fn open_dataset(manifest_path: &Path) -> Result<data_store::DatasetReader> {
    data_store::DatasetReader::open(manifest_path)
        .with_context(|| format!("opening dataset {manifest_path:?}"))
}

pub fn latent_dims(cfg: &PipelineConfig) -> Result<(usize, usize, usize)> {
    let spec = cfg
        .codec
        .spec_for(cfg.sim.sim.height, cfg.sim.sim.width, 1)?;
    Ok(spec.latent_dims())
}

/// Writes a loss curve as `step,epoch,loss` CSV rows.
pub fn write_loss_csv(path: &Path, rows: &[(u64, usize, f64)]) -> Result<()> {
    let mut out = String::from("step,epoch,loss\n");
    for (step, epoch, loss) in rows {
        out.push_str(&format!("{step},{epoch},{loss:.8}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads sample indices from a manifest-backed reader into (target,
/// context) pixel pairs.
pub fn read_batch(
    reader: &mut data_store::DatasetReader,
    indices: &[usize],
) -> Result<Vec<gnwd_core::data_store::SequenceSample>> {
    indices
        .iter()
        .map(|&i| reader.read_sample(i).map_err(anyhow::Error::from))
        .collect()
}

pub fn manifest_summary(m: &DatasetManifest) -> String {
    format!(
        "{} split `{}`: {} samples of {}+{} frames at {}x{}",
        m.data_path.display(),
        m.split,
        m.count,
        m.l_in,
        m.l_out,
        m.height,
        m.width
    )
}

/// Extracts frame `idx` of an `[L, ...]` sequence tensor.
pub fn frame_of(seq: &TensorF32, idx: usize) -> TensorF32 {
    let l = seq.shape()[0];
    assert!(idx < l, "frame index {idx} out of {l}");
    let per = seq.len() / l;
    TensorF32::new(
        seq.shape()[1..].to_vec(),
        seq.data()[idx * per..(idx + 1) * per].to_vec(),
    )
    .expect("frame slice")
}
