//! Run configuration: a flat key=value text format with dotted namespaces
//! ("model.dim=64"), '#' comment lines, and typed readers. The canonical
//! serialization round-trips bit-exactly (floats print shortest-roundtrip),
//! which is what lets checkpoints embed their config verbatim.

use std::collections::HashMap;

use crate::distill::{DistillConfig, TeacherNorm};
use crate::error::{Error, Result};
use crate::head::HeadConfig;
use crate::model::ModelConfig;
use crate::views::ViewConfig;
use crate::vit::ViTConfig;

/// Parsed key=value lines, preserving source line numbers for errors.
#[derive(Debug, Clone)]
pub struct KvConfig {
    entries: Vec<(usize, String, String)>,
    index: HashMap<String, usize>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut index = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some(eq) = trimmed.find('=') else {
                return Err(Error::Config { line, msg: format!("no '=' in {trimmed:?}") });
            };
            let key = trimmed[..eq].trim();
            let value = trimmed[eq + 1..].trim();
            if key.is_empty() {
                return Err(Error::Config { line, msg: "empty key".into() });
            }
            if index.contains_key(key) {
                return Err(Error::Config { line, msg: format!("duplicate key {key:?}") });
            }
            index.insert(key.to_string(), entries.len());
            entries.push((line, key.to_string(), value.to_string()));
        }
        Ok(Self { entries, index })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.index.get(key).map(|&i| self.entries[i].2.as_str())
    }

    fn line_of(&self, key: &str) -> usize {
        self.index.get(key).map(|&i| self.entries[i].0).unwrap_or(0)
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config {
                line: self.line_of(key),
                msg: format!("{key}: {v:?} is not a number"),
            }),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config {
                line: self.line_of(key),
                msg: format!("{key}: {v:?} is not a nonnegative integer"),
            }),
        }
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config {
                line: self.line_of(key),
                msg: format!("{key}: {v:?} is not a nonnegative integer"),
            }),
        }
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    /// Every key must be consumed by the reader; typos surface here.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        for (line, key, _) in &self.entries {
            if !known.contains(&key.as_str()) {
                return Err(Error::Config { line: *line, msg: format!("unknown key {key:?}") });
            }
        }
        Ok(())
    }
}

/// Everything one training run needs. Field-by-field equality holds across a
/// to_text/from_text round trip.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_data: String,
    pub test_data: Option<String>,
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub views: ViewConfig,
    /// Learning rate per 256 samples; the linear scaling rule applies it.
    pub lr_base: f64,
    pub lr_final: f64,
    pub lr_warmup_frac: f64,
    pub wd_base: f64,
    pub wd_final: f64,
    /// Steps between checkpoints; 0 = final checkpoint only.
    pub ckpt_every: usize,
    /// Steps between teacher/student k-NN snapshots; 0 = never.
    pub eval_every: usize,
    /// How many train/test rows the periodic snapshot uses.
    pub eval_subset: usize,
    /// CLS depth concatenated for evaluation features.
    pub eval_layers: usize,
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "epochs",
    "batch_size",
    "data.train",
    "data.test",
    "model.patch_size",
    "model.depth",
    "model.dim",
    "model.heads",
    "model.mlp_ratio",
    "model.base_grid",
    "model.in_chans",
    "head.mlp_layers",
    "head.hidden_dim",
    "head.bottleneck_dim",
    "head.out_dim",
    "distill.tau_s",
    "distill.tau_t_start",
    "distill.tau_t_end",
    "distill.tau_t_warmup_frac",
    "distill.center_m",
    "distill.lambda_base",
    "distill.lambda_final",
    "distill.teacher_norm",
    "distill.sinkhorn_iters",
    "distill.sinkhorn_tau",
    "views.n_local",
    "views.global_size",
    "views.local_size",
    "views.scale_split",
    "views.local_scale_min",
    "views.flip_p",
    "views.jitter_p",
    "views.jitter_brightness",
    "views.jitter_contrast",
    "views.jitter_saturation",
    "views.blur_p_global1",
    "views.blur_p_global2",
    "views.blur_p_local",
    "views.blur_sigma_min",
    "views.blur_sigma_max",
    "views.solarize_p",
    "views.solarize_threshold",
    "views.ratio_min",
    "views.ratio_max",
    "optim.lr_base",
    "optim.lr_final",
    "optim.lr_warmup_frac",
    "optim.wd_base",
    "optim.wd_final",
    "train.ckpt_every",
    "train.eval_every",
    "train.eval_subset",
    "train.eval_layers",
];

impl RunConfig {
    pub fn default_toy() -> Self {
        Self {
            seed: 7,
            epochs: 100,
            batch_size: 64,
            train_data: "data/train.dsv".into(),
            test_data: None,
            model: ModelConfig::toy(),
            distill: DistillConfig::toy(),
            views: ViewConfig::toy(),
            lr_base: 0.0005,
            lr_final: 1e-6,
            lr_warmup_frac: 0.1,
            wd_base: 0.04,
            wd_final: 0.4,
            ckpt_every: 0,
            eval_every: 0,
            eval_subset: 200,
            eval_layers: 4,
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = KvConfig::parse(text)?;
        kv.reject_unknown(KNOWN_KEYS)?;
        let d = Self::default_toy();
        let teacher_norm = match kv.get("distill.teacher_norm") {
            None => d.distill.teacher_norm,
            Some(v) => TeacherNorm::parse(v).map_err(|e| Error::Config {
                line: kv.line_of("distill.teacher_norm"),
                msg: e.to_string(),
            })?,
        };
        let cfg = Self {
            seed: kv.get_u64("seed", d.seed)?,
            epochs: kv.get_usize("epochs", d.epochs)?,
            batch_size: kv.get_usize("batch_size", d.batch_size)?,
            train_data: kv.get_str("data.train", &d.train_data),
            test_data: kv.get("data.test").map(str::to_string),
            model: ModelConfig {
                vit: ViTConfig {
                    patch_size: kv.get_usize("model.patch_size", d.model.vit.patch_size)?,
                    depth: kv.get_usize("model.depth", d.model.vit.depth)?,
                    dim: kv.get_usize("model.dim", d.model.vit.dim)?,
                    heads: kv.get_usize("model.heads", d.model.vit.heads)?,
                    mlp_ratio: kv.get_usize("model.mlp_ratio", d.model.vit.mlp_ratio)?,
                    base_grid: kv.get_usize("model.base_grid", d.model.vit.base_grid)?,
                    in_chans: kv.get_usize("model.in_chans", d.model.vit.in_chans)?,
                },
                head: HeadConfig {
                    mlp_layers: kv.get_usize("head.mlp_layers", d.model.head.mlp_layers)?,
                    hidden_dim: kv.get_usize("head.hidden_dim", d.model.head.hidden_dim)?,
                    bottleneck_dim: kv
                        .get_usize("head.bottleneck_dim", d.model.head.bottleneck_dim)?,
                    out_dim: kv.get_usize("head.out_dim", d.model.head.out_dim)?,
                },
            },
            distill: DistillConfig {
                tau_s: kv.get_f64("distill.tau_s", d.distill.tau_s)?,
                tau_t_start: kv.get_f64("distill.tau_t_start", d.distill.tau_t_start)?,
                tau_t_end: kv.get_f64("distill.tau_t_end", d.distill.tau_t_end)?,
                tau_t_warmup_frac: kv
                    .get_f64("distill.tau_t_warmup_frac", d.distill.tau_t_warmup_frac)?,
                center_m: kv.get_f64("distill.center_m", d.distill.center_m)?,
                lambda_base: kv.get_f64("distill.lambda_base", d.distill.lambda_base)?,
                lambda_final: kv.get_f64("distill.lambda_final", d.distill.lambda_final)?,
                teacher_norm,
                sinkhorn_iters: kv.get_usize("distill.sinkhorn_iters", d.distill.sinkhorn_iters)?,
                sinkhorn_tau: kv.get_f64("distill.sinkhorn_tau", d.distill.sinkhorn_tau)?,
            },
            views: ViewConfig {
                n_local: kv.get_usize("views.n_local", d.views.n_local)?,
                global_size: kv.get_usize("views.global_size", d.views.global_size)?,
                local_size: kv.get_usize("views.local_size", d.views.local_size)?,
                scale_split: kv.get_f64("views.scale_split", d.views.scale_split)?,
                local_scale_min: kv.get_f64("views.local_scale_min", d.views.local_scale_min)?,
                flip_p: kv.get_f64("views.flip_p", d.views.flip_p)?,
                jitter_p: kv.get_f64("views.jitter_p", d.views.jitter_p)?,
                jitter_strengths: (
                    kv.get_f64("views.jitter_brightness", d.views.jitter_strengths.0)?,
                    kv.get_f64("views.jitter_contrast", d.views.jitter_strengths.1)?,
                    kv.get_f64("views.jitter_saturation", d.views.jitter_strengths.2)?,
                ),
                blur_p: (
                    kv.get_f64("views.blur_p_global1", d.views.blur_p.0)?,
                    kv.get_f64("views.blur_p_global2", d.views.blur_p.1)?,
                    kv.get_f64("views.blur_p_local", d.views.blur_p.2)?,
                ),
                blur_sigma: (
                    kv.get_f64("views.blur_sigma_min", d.views.blur_sigma.0)?,
                    kv.get_f64("views.blur_sigma_max", d.views.blur_sigma.1)?,
                ),
                solarize_p: kv.get_f64("views.solarize_p", d.views.solarize_p)?,
                solarize_threshold: kv
                    .get_f64("views.solarize_threshold", d.views.solarize_threshold)?,
                ratio: (
                    kv.get_f64("views.ratio_min", d.views.ratio.0)?,
                    kv.get_f64("views.ratio_max", d.views.ratio.1)?,
                ),
            },
            lr_base: kv.get_f64("optim.lr_base", d.lr_base)?,
            lr_final: kv.get_f64("optim.lr_final", d.lr_final)?,
            lr_warmup_frac: kv.get_f64("optim.lr_warmup_frac", d.lr_warmup_frac)?,
            wd_base: kv.get_f64("optim.wd_base", d.wd_base)?,
            wd_final: kv.get_f64("optim.wd_final", d.wd_final)?,
            ckpt_every: kv.get_usize("train.ckpt_every", d.ckpt_every)?,
            eval_every: kv.get_usize("train.eval_every", d.eval_every)?,
            eval_subset: kv.get_usize("train.eval_subset", d.eval_subset)?,
            eval_layers: kv.get_usize("train.eval_layers", d.eval_layers)?,
        };
        Ok(cfg)
    }

    /// Canonical text form: every key, grouped, floats shortest-roundtrip.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        push("seed", self.seed.to_string());
        push("epochs", self.epochs.to_string());
        push("batch_size", self.batch_size.to_string());
        push("data.train", self.train_data.clone());
        if let Some(t) = &self.test_data {
            push("data.test", t.clone());
        }
        let v = &self.model.vit;
        push("model.patch_size", v.patch_size.to_string());
        push("model.depth", v.depth.to_string());
        push("model.dim", v.dim.to_string());
        push("model.heads", v.heads.to_string());
        push("model.mlp_ratio", v.mlp_ratio.to_string());
        push("model.base_grid", v.base_grid.to_string());
        push("model.in_chans", v.in_chans.to_string());
        let h = &self.model.head;
        push("head.mlp_layers", h.mlp_layers.to_string());
        push("head.hidden_dim", h.hidden_dim.to_string());
        push("head.bottleneck_dim", h.bottleneck_dim.to_string());
        push("head.out_dim", h.out_dim.to_string());
        let di = &self.distill;
        push("distill.tau_s", di.tau_s.to_string());
        push("distill.tau_t_start", di.tau_t_start.to_string());
        push("distill.tau_t_end", di.tau_t_end.to_string());
        push("distill.tau_t_warmup_frac", di.tau_t_warmup_frac.to_string());
        push("distill.center_m", di.center_m.to_string());
        push("distill.lambda_base", di.lambda_base.to_string());
        push("distill.lambda_final", di.lambda_final.to_string());
        push("distill.teacher_norm", di.teacher_norm.name().to_string());
        push("distill.sinkhorn_iters", di.sinkhorn_iters.to_string());
        push("distill.sinkhorn_tau", di.sinkhorn_tau.to_string());
        let w = &self.views;
        push("views.n_local", w.n_local.to_string());
        push("views.global_size", w.global_size.to_string());
        push("views.local_size", w.local_size.to_string());
        push("views.scale_split", w.scale_split.to_string());
        push("views.local_scale_min", w.local_scale_min.to_string());
        push("views.flip_p", w.flip_p.to_string());
        push("views.jitter_p", w.jitter_p.to_string());
        push("views.jitter_brightness", w.jitter_strengths.0.to_string());
        push("views.jitter_contrast", w.jitter_strengths.1.to_string());
        push("views.jitter_saturation", w.jitter_strengths.2.to_string());
        push("views.blur_p_global1", w.blur_p.0.to_string());
        push("views.blur_p_global2", w.blur_p.1.to_string());
        push("views.blur_p_local", w.blur_p.2.to_string());
        push("views.blur_sigma_min", w.blur_sigma.0.to_string());
        push("views.blur_sigma_max", w.blur_sigma.1.to_string());
        push("views.solarize_p", w.solarize_p.to_string());
        push("views.solarize_threshold", w.solarize_threshold.to_string());
        push("views.ratio_min", w.ratio.0.to_string());
        push("views.ratio_max", w.ratio.1.to_string());
        push("optim.lr_base", self.lr_base.to_string());
        push("optim.lr_final", self.lr_final.to_string());
        push("optim.lr_warmup_frac", self.lr_warmup_frac.to_string());
        push("optim.wd_base", self.wd_base.to_string());
        push("optim.wd_final", self.wd_final.to_string());
        push("train.ckpt_every", self.ckpt_every.to_string());
        push("train.eval_every", self.eval_every.to_string());
        push("train.eval_subset", self.eval_subset.to_string());
        push("train.eval_layers", self.eval_layers.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Param("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Param("need at least one epoch".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_warmup_frac) {
            return Err(Error::Param(format!(
                "lr warmup fraction {} outside [0, 1]",
                self.lr_warmup_frac
            )));
        }
        self.model.validate()?;
        self.distill.validate()?;
        self.views.validate(self.model.vit.patch_size)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parser_handles_comments_blanks_and_spacing() {
        let kv = KvConfig::parse(
            "# a comment\n\n  model.dim = 64 \nname=hello world\n\t# indented comment\n",
        )
        .unwrap();
        assert_eq!(kv.get("model.dim"), Some("64"));
        assert_eq!(kv.get("name"), Some("hello world"));
        assert_eq!(kv.get("missing"), None);
    }

    #[test]
    fn parser_reports_line_numbers() {
        match KvConfig::parse("a=1\nbroken line\n") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected config error, got {other:?}"),
        }
        match KvConfig::parse("a=1\n\na=2\n") {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("duplicate"));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
        let kv = KvConfig::parse("x=notanumber\n").unwrap();
        match kv.get_f64("x", 0.0) {
            Err(Error::Config { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected number error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_line() {
        match RunConfig::from_text("seed=1\nmodel.dmi=64\n") {
            Err(Error::Config { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("model.dmi"));
            }
            other => panic!("expected unknown-key error, got {other:?}"),
        }
    }

    #[test]
    fn empty_text_is_the_default_config() {
        let cfg = RunConfig::from_text("").unwrap();
        assert_eq!(cfg, RunConfig::default_toy());
    }

    #[test]
    fn round_trip_is_exact_including_awkward_floats() {
        let mut cfg = RunConfig::default_toy();
        cfg.seed = 123456789012345;
        cfg.views.ratio = (0.75, 4.0 / 3.0);
        cfg.distill.tau_s = 0.1 + 0.2; // 0.30000000000000004
        cfg.distill.teacher_norm = TeacherNorm::Sinkhorn;
        cfg.test_data = Some("elsewhere/test.dsv".into());
        cfg.lr_base = 1.5625e-5;
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        // and the canonical text is a fixed point
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn overrides_apply_on_top_of_defaults() {
        let cfg = RunConfig::from_text(
            "model.dim=32\nmodel.heads=2\ndistill.teacher_norm=softmax_batch\nbatch_size=8\n",
        )
        .unwrap();
        assert_eq!(cfg.model.vit.dim, 32);
        assert_eq!(cfg.model.vit.heads, 2);
        assert_eq!(cfg.distill.teacher_norm, TeacherNorm::SoftmaxBatch);
        assert_eq!(cfg.batch_size, 8);
        // untouched fields keep their defaults
        assert_eq!(cfg.model.vit.depth, 4);
        assert_eq!(cfg.distill.tau_s, 0.1);
    }

    #[test]
    fn validation_walks_into_subconfigs() {
        let mut cfg = RunConfig::default_toy();
        cfg.validate().unwrap();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default_toy();
        cfg.model.vit.heads = 3; // 64 % 3 != 0
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default_toy();
        cfg.views.global_size = 30; // not a multiple of the patch size
        assert!(cfg.validate().is_err());
    }
}
