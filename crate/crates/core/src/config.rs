//! Structured-text configuration: `key = value` lines grouped under
//! `[section]` headers, `#` comments. Used for the pipeline config and for
//! dataset manifest sidecars.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Parsed sectioned key/value document. Sections and keys are kept sorted so
/// serialization is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TextDoc {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl TextDoc {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<TextDoc> {
        let mut doc = TextDoc::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| {
                        Error::Format(format!("line {}: unterminated section header", lineno + 1))
                    })?
                    .trim();
                if name.is_empty() {
                    return Err(Error::Format(format!(
                        "line {}: empty section name",
                        lineno + 1
                    )));
                }
                section = name.to_string();
                doc.sections.entry(section.clone()).or_default();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Format(format!("line {}: empty key", lineno + 1)));
            }
            doc.sections
                .entry(section.clone())
                .or_default()
                .insert(key.to_string(), value.trim().to_string());
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<TextDoc> {
        let text = std::fs::read_to_string(path)?;
        TextDoc::parse(&text)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|s| s.as_str())
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    pub fn get_u64(&self, section: &str, key: &str) -> Result<Option<u64>> {
        self.parse_with(section, key, |v| v.parse::<u64>().ok())
    }

    pub fn get_usize(&self, section: &str, key: &str) -> Result<Option<usize>> {
        self.parse_with(section, key, |v| v.parse::<usize>().ok())
    }

    pub fn get_f64(&self, section: &str, key: &str) -> Result<Option<f64>> {
        self.parse_with(section, key, |v| v.parse::<f64>().ok())
    }

    pub fn get_bool(&self, section: &str, key: &str) -> Result<Option<bool>> {
        self.parse_with(section, key, |v| match v {
            "true" | "1" | "yes" => Some(true),
            "false" | "0" | "no" => Some(false),
            _ => None,
        })
    }

    fn parse_with<T>(
        &self,
        section: &str,
        key: &str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<Option<T>> {
        match self.get(section, key) {
            None => Ok(None),
            Some(v) => parse(v).map(Some).ok_or_else(|| {
                Error::Format(format!("[{section}] {key}: cannot parse value `{v}`"))
            }),
        }
    }

    /// Deterministic rendering: sections and keys in sorted order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, entries) in &self.sections {
            if !name.is_empty() {
                let _ = writeln!(out, "[{name}]");
            }
            for (k, v) in entries {
                let _ = writeln!(out, "{k} = {v}");
            }
            let _ = writeln!(out);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render_round_trip() {
        let text = "# comment\n[run]\nseed = 42\nout = runs/a\n\n[sim]\ng = 2.5\n";
        let doc = TextDoc::parse(text).unwrap();
        assert_eq!(doc.get("run", "seed"), Some("42"));
        assert_eq!(doc.get_f64("sim", "g").unwrap(), Some(2.5));
        let doc2 = TextDoc::parse(&doc.render()).unwrap();
        assert_eq!(doc, doc2);
    }

    #[test]
    fn parse_rejects_malformed_lines() {
        assert!(TextDoc::parse("[run\nseed = 1").is_err());
        assert!(TextDoc::parse("just words").is_err());
        assert!(TextDoc::parse("= 3").is_err());
    }

    #[test]
    fn typed_getters_report_bad_values() {
        let doc = TextDoc::parse("[a]\nx = notanumber\n").unwrap();
        assert!(doc.get_f64("a", "x").is_err());
        assert_eq!(doc.get_f64("a", "missing").unwrap(), None);
    }
}

// ---------------------------------------------------------------------------
// Pipeline configuration
// ---------------------------------------------------------------------------

use crate::alignment::GuidanceConfig;
use crate::codec::CodecSpec;
use crate::diffusion::{make_schedule, NoiseSchedule, ScheduleKind};
use crate::nbody::{GenConfig, SimConfig};

/// Resolved pipeline configuration. Every field has a default; a config
/// file overrides selectively, and the fully resolved document is written
/// beside every run's outputs.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub run: RunConfig,
    pub sim: SimSection,
    pub codec: CodecSection,
    pub diffusion: DiffusionSection,
    pub denoiser: DenoiserSection,
    pub guidance: GuidanceSection,
    pub eval: EvalSection,
    pub oracle: OracleSection,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    /// 0 selects the runtime default.
    pub workers: usize,
}

#[derive(Debug, Clone)]
pub struct SimSection {
    pub sim: SimConfig,
    pub count_train: usize,
    pub count_test: usize,
    pub l_in: usize,
    pub l_out: usize,
    pub sprite_size: usize,
    pub min_separation: f64,
    /// Optional path to an IDX image file for sprites; builtin glyphs
    /// otherwise.
    pub idx_images: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CodecSection {
    pub mode: String,
    pub patch: usize,
    pub kept: usize,
}

impl CodecSection {
    pub fn spec_for(&self, height: usize, width: usize, channels: usize) -> crate::error::Result<CodecSpec> {
        let spec = match self.mode.as_str() {
            "identity" => CodecSpec::identity(height, width, channels),
            "patch" => CodecSpec::patch_ortho(height, width, channels, self.patch, self.kept),
            other => {
                return Err(crate::error::Error::contract(format!(
                    "unknown codec mode `{other}` (expected identity|patch)"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionSection {
    pub t_steps: usize,
    pub kind: String,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl DiffusionSection {
    pub fn schedule(&self) -> crate::error::Result<NoiseSchedule> {
        make_schedule(
            self.t_steps,
            ScheduleKind::parse(&self.kind)?,
            self.beta_min,
            self.beta_max,
        )
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserSection {
    pub width: usize,
    pub mid_width: usize,
    pub temb_dim: usize,
    pub temb_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

#[derive(Debug, Clone)]
pub struct GuidanceSection {
    /// energy | intensity | none
    pub kind: String,
    pub lambda: f64,
    pub n_sigma: f64,
    pub grad_clip: f64,
    /// aligned | oracle (intensity supports both; energy is aligned-only)
    pub path: String,
    pub align_width: usize,
    pub align_levels: usize,
    pub align_epochs: usize,
    pub align_batch: usize,
    pub align_lr: f64,
    pub detector_width: usize,
}

impl GuidanceSection {
    pub fn guidance_config(&self) -> crate::error::Result<GuidanceConfig> {
        let mut cfg = GuidanceConfig::new(self.lambda)?;
        if self.grad_clip > 0.0 {
            cfg.grad_clip = Some(self.grad_clip);
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct EvalSection {
    pub ensemble: usize,
    pub eval_count: usize,
    pub previews: usize,
    pub png: bool,
}

/// Parameters of the analytic sampler/guidance health check: a 2-D Gaussian
/// task with a closed-form denoiser and its own near-complete noising
/// schedule.
#[derive(Debug, Clone)]
pub struct OracleSection {
    pub chains: usize,
    pub t_steps: usize,
    pub kind: String,
    pub beta_min: f64,
    pub beta_max: f64,
    pub mean: [f64; 2],
    pub var: [f64; 2],
    pub lambda: f64,
    pub mean_tol: f64,
    pub cov_tol: f64,
    pub violation_ratio_max: f64,
    pub cov_drift_max: f64,
}

impl OracleSection {
    pub fn schedule(&self) -> crate::error::Result<NoiseSchedule> {
        make_schedule(
            self.t_steps,
            ScheduleKind::parse(&self.kind)?,
            self.beta_min,
            self.beta_max,
        )
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            run: RunConfig {
                seed: 0,
                output_dir: "runs/default".to_string(),
                workers: 0,
            },
            sim: SimSection {
                sim: SimConfig::for_frame(64, 64),
                count_train: 200,
                count_test: 50,
                l_in: 10,
                l_out: 10,
                sprite_size: 28,
                min_separation: 8.0,
                idx_images: None,
            },
            codec: CodecSection {
                mode: "patch".to_string(),
                patch: 4,
                kept: 3,
            },
            diffusion: DiffusionSection {
                t_steps: 200,
                kind: "linear".to_string(),
                beta_min: 1e-4,
                beta_max: 2e-2,
            },
            denoiser: DenoiserSection {
                width: 32,
                mid_width: 64,
                temb_dim: 32,
                temb_hidden: 64,
                epochs: 20,
                batch_size: 16,
                lr: 1e-3,
                weight_decay: 1e-5,
                grad_clip: 1.0,
            },
            guidance: GuidanceSection {
                kind: "energy".to_string(),
                lambda: 0.0,
                n_sigma: 0.0,
                grad_clip: 0.0,
                path: "aligned".to_string(),
                align_width: 32,
                align_levels: 3,
                align_epochs: 10,
                align_batch: 16,
                align_lr: 1e-3,
                detector_width: 24,
            },
            eval: EvalSection {
                ensemble: 8,
                eval_count: 0,
                previews: 4,
                png: false,
            },
            oracle: OracleSection {
                chains: 10_000,
                t_steps: 200,
                kind: "linear".to_string(),
                beta_min: 1e-3,
                beta_max: 8e-2,
                mean: [0.5, -0.3],
                var: [1.0, 0.16],
                lambda: 4.0,
                mean_tol: 0.05,
                cov_tol: 0.10,
                violation_ratio_max: 0.5,
                cov_drift_max: 0.20,
            },
        }
    }
}

impl PipelineConfig {
    /// Applies a parsed document on top of the defaults.
    pub fn from_doc(doc: &TextDoc) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        let run = &mut cfg.run;
        if let Some(v) = doc.get_u64("run", "seed")? {
            run.seed = v;
        }
        if let Some(v) = doc.get("run", "output_dir") {
            run.output_dir = v.to_string();
        }
        if let Some(v) = doc.get_usize("run", "workers")? {
            run.workers = v;
        }

        let s = &mut cfg.sim;
        for (key, field) in [
            ("g", &mut s.sim.g as &mut f64),
            ("r", &mut s.sim.r),
            ("d_soft", &mut s.sim.d_soft),
            ("dt", &mut s.sim.dt),
            ("margin", &mut s.sim.margin),
            ("speed_min", &mut s.sim.speed_min),
            ("speed_max", &mut s.sim.speed_max),
            ("mass_min", &mut s.sim.mass_min),
            ("mass_max", &mut s.sim.mass_max),
            ("min_separation", &mut s.min_separation),
        ] {
            if let Some(v) = doc.get_f64("sim", key)? {
                *field = v;
            }
        }
        for (key, field) in [
            ("n", &mut s.sim.n as &mut usize),
            ("substeps", &mut s.sim.substeps),
            ("height", &mut s.sim.height),
            ("width", &mut s.sim.width),
            ("count_train", &mut s.count_train),
            ("count_test", &mut s.count_test),
            ("l_in", &mut s.l_in),
            ("l_out", &mut s.l_out),
            ("sprite_size", &mut s.sprite_size),
        ] {
            if let Some(v) = doc.get_usize("sim", key)? {
                *field = v;
            }
        }
        // reflection box follows the frame unless overridden
        s.sim.d_ref = ((s.sim.height.pow(2) + s.sim.width.pow(2)) as f64).sqrt();
        if let Some(v) = doc.get_f64("sim", "d_ref")? {
            s.sim.d_ref = v;
        }
        if let Some(v) = doc.get("sim", "idx_images") {
            if !v.is_empty() {
                s.idx_images = Some(v.to_string());
            }
        }

        if let Some(v) = doc.get("codec", "mode") {
            cfg.codec.mode = v.to_string();
        }
        if let Some(v) = doc.get_usize("codec", "patch")? {
            cfg.codec.patch = v;
        }
        if let Some(v) = doc.get_usize("codec", "kept")? {
            cfg.codec.kept = v;
        }

        if let Some(v) = doc.get_usize("diffusion", "t_steps")? {
            cfg.diffusion.t_steps = v;
        }
        if let Some(v) = doc.get("diffusion", "kind") {
            cfg.diffusion.kind = v.to_string();
        }
        if let Some(v) = doc.get_f64("diffusion", "beta_min")? {
            cfg.diffusion.beta_min = v;
        }
        if let Some(v) = doc.get_f64("diffusion", "beta_max")? {
            cfg.diffusion.beta_max = v;
        }

        let d = &mut cfg.denoiser;
        for (key, field) in [
            ("width", &mut d.width as &mut usize),
            ("mid_width", &mut d.mid_width),
            ("temb_dim", &mut d.temb_dim),
            ("temb_hidden", &mut d.temb_hidden),
            ("epochs", &mut d.epochs),
            ("batch_size", &mut d.batch_size),
        ] {
            if let Some(v) = doc.get_usize("denoiser", key)? {
                *field = v;
            }
        }
        for (key, field) in [
            ("lr", &mut d.lr as &mut f64),
            ("weight_decay", &mut d.weight_decay),
            ("grad_clip", &mut d.grad_clip),
        ] {
            if let Some(v) = doc.get_f64("denoiser", key)? {
                *field = v;
            }
        }

        let g = &mut cfg.guidance;
        if let Some(v) = doc.get("guidance", "kind") {
            g.kind = v.to_string();
        }
        if let Some(v) = doc.get("guidance", "path") {
            g.path = v.to_string();
        }
        for (key, field) in [
            ("lambda", &mut g.lambda as &mut f64),
            ("n_sigma", &mut g.n_sigma),
            ("grad_clip", &mut g.grad_clip),
            ("align_lr", &mut g.align_lr),
        ] {
            if let Some(v) = doc.get_f64("guidance", key)? {
                *field = v;
            }
        }
        for (key, field) in [
            ("align_width", &mut g.align_width as &mut usize),
            ("align_levels", &mut g.align_levels),
            ("align_epochs", &mut g.align_epochs),
            ("align_batch", &mut g.align_batch),
            ("detector_width", &mut g.detector_width),
        ] {
            if let Some(v) = doc.get_usize("guidance", key)? {
                *field = v;
            }
        }

        if let Some(v) = doc.get_usize("eval", "ensemble")? {
            cfg.eval.ensemble = v;
        }
        if let Some(v) = doc.get_usize("eval", "eval_count")? {
            cfg.eval.eval_count = v;
        }
        if let Some(v) = doc.get_usize("eval", "previews")? {
            cfg.eval.previews = v;
        }
        if let Some(v) = doc.get_bool("eval", "png")? {
            cfg.eval.png = v;
        }

        let o = &mut cfg.oracle;
        for (key, field) in [
            ("chains", &mut o.chains as &mut usize),
            ("t_steps", &mut o.t_steps),
        ] {
            if let Some(v) = doc.get_usize("oracle", key)? {
                *field = v;
            }
        }
        if let Some(v) = doc.get("oracle", "kind") {
            o.kind = v.to_string();
        }
        let [mean_a, mean_b] = &mut o.mean;
        let [var_a, var_b] = &mut o.var;
        for (key, field) in [
            ("beta_min", &mut o.beta_min as &mut f64),
            ("beta_max", &mut o.beta_max),
            ("mean_a", mean_a),
            ("mean_b", mean_b),
            ("var_a", var_a),
            ("var_b", var_b),
            ("lambda", &mut o.lambda),
            ("mean_tol", &mut o.mean_tol),
            ("cov_tol", &mut o.cov_tol),
            ("violation_ratio_max", &mut o.violation_ratio_max),
            ("cov_drift_max", &mut o.cov_drift_max),
        ] {
            if let Some(v) = doc.get_f64("oracle", key)? {
                *field = v;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        PipelineConfig::from_doc(&TextDoc::load(path)?)
    }

    /// Renders the fully resolved configuration.
    pub fn to_doc(&self) -> TextDoc {
        let mut doc = TextDoc::new();
        doc.set("run", "seed", self.run.seed);
        doc.set("run", "output_dir", &self.run.output_dir);
        doc.set("run", "workers", self.run.workers);

        let s = &self.sim;
        doc.set("sim", "n", s.sim.n);
        doc.set("sim", "height", s.sim.height);
        doc.set("sim", "width", s.sim.width);
        doc.set("sim", "g", s.sim.g);
        doc.set("sim", "r", s.sim.r);
        doc.set("sim", "d_soft", s.sim.d_soft);
        doc.set("sim", "d_ref", s.sim.d_ref);
        doc.set("sim", "dt", s.sim.dt);
        doc.set("sim", "substeps", s.sim.substeps);
        doc.set("sim", "margin", s.sim.margin);
        doc.set("sim", "speed_min", s.sim.speed_min);
        doc.set("sim", "speed_max", s.sim.speed_max);
        doc.set("sim", "mass_min", s.sim.mass_min);
        doc.set("sim", "mass_max", s.sim.mass_max);
        doc.set("sim", "count_train", s.count_train);
        doc.set("sim", "count_test", s.count_test);
        doc.set("sim", "l_in", s.l_in);
        doc.set("sim", "l_out", s.l_out);
        doc.set("sim", "sprite_size", s.sprite_size);
        doc.set("sim", "min_separation", s.min_separation);
        doc.set("sim", "idx_images", s.idx_images.clone().unwrap_or_default());

        doc.set("codec", "mode", &self.codec.mode);
        doc.set("codec", "patch", self.codec.patch);
        doc.set("codec", "kept", self.codec.kept);

        doc.set("diffusion", "t_steps", self.diffusion.t_steps);
        doc.set("diffusion", "kind", &self.diffusion.kind);
        doc.set("diffusion", "beta_min", self.diffusion.beta_min);
        doc.set("diffusion", "beta_max", self.diffusion.beta_max);

        let d = &self.denoiser;
        doc.set("denoiser", "width", d.width);
        doc.set("denoiser", "mid_width", d.mid_width);
        doc.set("denoiser", "temb_dim", d.temb_dim);
        doc.set("denoiser", "temb_hidden", d.temb_hidden);
        doc.set("denoiser", "epochs", d.epochs);
        doc.set("denoiser", "batch_size", d.batch_size);
        doc.set("denoiser", "lr", d.lr);
        doc.set("denoiser", "weight_decay", d.weight_decay);
        doc.set("denoiser", "grad_clip", d.grad_clip);

        let g = &self.guidance;
        doc.set("guidance", "kind", &g.kind);
        doc.set("guidance", "path", &g.path);
        doc.set("guidance", "lambda", g.lambda);
        doc.set("guidance", "n_sigma", g.n_sigma);
        doc.set("guidance", "grad_clip", g.grad_clip);
        doc.set("guidance", "align_width", g.align_width);
        doc.set("guidance", "align_levels", g.align_levels);
        doc.set("guidance", "align_epochs", g.align_epochs);
        doc.set("guidance", "align_batch", g.align_batch);
        doc.set("guidance", "align_lr", g.align_lr);
        doc.set("guidance", "detector_width", g.detector_width);

        doc.set("eval", "ensemble", self.eval.ensemble);
        doc.set("eval", "eval_count", self.eval.eval_count);
        doc.set("eval", "previews", self.eval.previews);
        doc.set("eval", "png", self.eval.png);

        let o = &self.oracle;
        doc.set("oracle", "chains", o.chains);
        doc.set("oracle", "t_steps", o.t_steps);
        doc.set("oracle", "kind", &o.kind);
        doc.set("oracle", "beta_min", o.beta_min);
        doc.set("oracle", "beta_max", o.beta_max);
        doc.set("oracle", "mean_a", o.mean[0]);
        doc.set("oracle", "mean_b", o.mean[1]);
        doc.set("oracle", "var_a", o.var[0]);
        doc.set("oracle", "var_b", o.var[1]);
        doc.set("oracle", "lambda", o.lambda);
        doc.set("oracle", "mean_tol", o.mean_tol);
        doc.set("oracle", "cov_tol", o.cov_tol);
        doc.set("oracle", "violation_ratio_max", o.violation_ratio_max);
        doc.set("oracle", "cov_drift_max", o.cov_drift_max);
        doc
    }

    /// Gen-time dataset parameters for a split.
    pub fn gen_config(&self, split: &str) -> GenConfig {
        GenConfig {
            count: if split == "train" {
                self.sim.count_train
            } else {
                self.sim.count_test
            },
            l_in: self.sim.l_in,
            l_out: self.sim.l_out,
            seed: crate::rand_util::derive_seed(self.run.seed, if split == "train" { 1 } else { 2 }),
            split: split.to_string(),
            sprite_size: self.sim.sprite_size,
            min_separation: self.sim.min_separation,
        }
    }
}
