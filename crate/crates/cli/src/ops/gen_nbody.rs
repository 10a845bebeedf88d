//! Dataset generation: simulate, render, and persist train/test splits.

use anyhow::{Context, Result};
use gnwd_core::config::PipelineConfig;
use gnwd_core::nbody;

use super::{prepare_dir, sprite_pool, RunPaths};

pub fn run(cfg: &PipelineConfig) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let paths = RunPaths::new(cfg);
    prepare_dir(&paths.data_dir(), cfg)?;
    let sprites = sprite_pool(cfg)?;

    let mut out = Vec::new();
    for split in ["train", "test"] {
        let gen = cfg.gen_config(split);
        let data_path = paths.data_dir().join(format!("{split}.gnwd"));
        let manifest = nbody::generate_dataset(&cfg.sim.sim, &gen, &sprites, &data_path)
            .with_context(|| format!("generating {split} split"))?;
        println!("wrote {}", super::manifest_summary(&manifest));
        out.push(data_path);
    }
    Ok((out[0].clone(), out[1].clone()))
}
