//! Training driver: walks the dataset epoch by epoch, evaluates schedules,
//! runs distillation steps, and writes metrics, periodic snapshots, and
//! checkpoints. Every random draw is keyed by (seed, purpose, epoch, index),
//! so resuming from a checkpoint replays the exact run a single process
//! would have produced — nothing sequential carries across steps.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::data::{epoch_batches, gen_toy, Dataset, ToySpec};
use crate::distill::{train_step, DistillConfig, DistillState, StepHyper, TeacherNorm};
use crate::error::{Error, Result};
use crate::eval::{extract_features, knn_eval, KNN_DEFAULT_K, KNN_DEFAULT_TAU};
use crate::head::HeadConfig;
use crate::model::{decay_filter, ModelConfig};
use crate::optim::AdamW;
use crate::params::ParamSet;
use crate::rng::{stream, DOMAIN_INIT, DOMAIN_VIEWS};
use crate::scalar::Scalar;
use crate::schedule::{scaled_lr, Schedule};
use crate::views::{make_views, ViewConfig};
use crate::vit::ViTConfig;

#[derive(Debug)]
pub struct TrainOutcome {
    pub steps_run: u64,
    pub final_loss: f64,
    pub final_ckpt: PathBuf,
}

/// All four per-step schedules, derived from one config + step count.
pub struct RunSchedules {
    pub lr: Schedule,
    pub wd: Schedule,
    pub lambda: Schedule,
    pub tau_t: Schedule,
}

pub fn build_schedules(cfg: &RunConfig, total_steps: usize) -> RunSchedules {
    let warmup = (cfg.lr_warmup_frac * total_steps as f64).round() as usize;
    RunSchedules {
        lr: Schedule::cosine(scaled_lr(cfg.lr_base, cfg.batch_size), cfg.lr_final, total_steps)
            .with_warmup(warmup, 0.0),
        wd: Schedule::cosine(cfg.wd_base, cfg.wd_final, total_steps),
        lambda: cfg.distill.momentum_schedule(total_steps),
        tau_t: cfg.distill.teacher_temp_schedule(total_steps),
    }
}

fn head_subset(ds: &Dataset, n: usize) -> Dataset {
    let n = n.min(ds.n).max(1);
    let px = ds.c * ds.h * ds.w;
    Dataset {
        n,
        c: ds.c,
        h: ds.h,
        w: ds.w,
        pixels: ds.pixels[..n * px].to_vec(),
        labels: ds.labels[..n].to_vec(),
        class_names: ds.class_names.clone(),
        split: ds.split.clone(),
    }
}

fn snapshot_ckpt<T: Scalar>(
    config_text: &str,
    step: u64,
    epoch: u64,
    student: &ParamSet<T>,
    state: &DistillState<T>,
    opt: &AdamW<T>,
) -> Checkpoint<T> {
    let (m, v) = opt.moments();
    Checkpoint {
        config_text: config_text.to_string(),
        step,
        epoch,
        opt_steps: opt.steps_taken(),
        student: student.clone(),
        teacher: state.teacher.clone(),
        center: state.center.clone(),
        opt_m: m.to_vec(),
        opt_v: v.to_vec(),
    }
}

/// k-NN accuracy of frozen features from `params`, on truncated train/test
/// subsets. `l` is clamped to the network depth.
fn snapshot_knn<T: Scalar>(
    mcfg: &ModelConfig,
    params: &ParamSet<T>,
    bank_ds: &Dataset,
    query_ds: &Dataset,
    l: usize,
) -> Result<f64> {
    let l = l.clamp(1, mcfg.vit.depth);
    let bank = extract_features(mcfg, params, bank_ds, l)?;
    let queries = extract_features(mcfg, params, query_ds, l)?;
    let k = KNN_DEFAULT_K.min(bank.len());
    knn_eval(&bank, &queries, k, KNN_DEFAULT_TAU)
}

/// Run (or resume) a full training job. Artifacts under `out_dir`:
/// metrics.jsonl (one record per step), eval.jsonl (periodic teacher and
/// student k-NN), ckpt-NNNNNN.dck (periodic), final.dck. Resume requires the
/// checkpoint's embedded config to match `cfg` exactly; training continues
/// at the recorded step and reproduces the uninterrupted run bit for bit.
pub fn run_training<T: Scalar>(
    cfg: &RunConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let config_text = cfg.to_text();
    let train_ds = Dataset::load(Path::new(&cfg.train_data))?;
    let test_ds = match &cfg.test_data {
        Some(p) => Some(Dataset::load(Path::new(p))?),
        None => None,
    };
    if cfg.eval_every > 0 && test_ds.is_none() {
        return Err(Error::Param(
            "periodic evaluation needs data.test in the config".into(),
        ));
    }
    let n = train_ds.n;
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let sch = build_schedules(cfg, total_steps);
    let out_dim = cfg.model.head.out_dim;

    let (mut student, mut state, mut opt, start_step) = match resume {
        None => {
            let student =
                cfg.model.init_params::<T>(&mut stream(cfg.seed, DOMAIN_INIT, 0, 0))?;
            let state = DistillState::new(&student, out_dim);
            let opt = AdamW::new(&student, decay_filter);
            (student, state, opt, 0u64)
        }
        Some(path) => {
            let ckpt = load_checkpoint::<T>(path)?;
            if ckpt.config_text != config_text {
                return Err(Error::Contract(format!(
                    "checkpoint {} was written by a different config; refusing to resume",
                    path.display()
                )));
            }
            if ckpt.step > total_steps as u64 {
                return Err(Error::Contract(format!(
                    "checkpoint is at step {} but this run has only {total_steps}",
                    ckpt.step
                )));
            }
            let opt = AdamW::restore(
                &ckpt.student,
                decay_filter,
                ckpt.opt_m,
                ckpt.opt_v,
                ckpt.opt_steps,
            )?;
            let state = DistillState { teacher: ckpt.teacher, center: ckpt.center };
            (ckpt.student, state, opt, ckpt.step)
        }
    };

    fs::create_dir_all(out_dir)?;
    let open_log = |name: &str| -> Result<BufWriter<File>> {
        let mut o = OpenOptions::new();
        o.create(true);
        if start_step > 0 {
            o.append(true);
        } else {
            o.write(true).truncate(true);
        }
        Ok(BufWriter::new(o.open(out_dir.join(name))?))
    };
    let mut metrics = open_log("metrics.jsonl")?;
    let mut eval_log = open_log("eval.jsonl")?;

    let eval_sets = test_ds.as_ref().map(|t| {
        (head_subset(&train_ds, cfg.eval_subset), head_subset(t, cfg.eval_subset))
    });

    let mut last_loss = f64::NAN;
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut batches_epoch = u64::MAX;
    for s in start_step..total_steps as u64 {
        let epoch = s / steps_per_epoch as u64;
        let slot = (s % steps_per_epoch as u64) as usize;
        if epoch != batches_epoch {
            batches = epoch_batches(n, cfg.batch_size, cfg.seed, epoch)?;
            batches_epoch = epoch;
        }
        let mut views = Vec::with_capacity(batches[slot].len());
        for &i in &batches[slot] {
            let img = train_ds.image(i);
            let mut rng = stream(cfg.seed, DOMAIN_VIEWS, epoch, i as u64);
            views.push(make_views(&img, &cfg.views, &mut rng)?);
        }
        let hp = StepHyper {
            lr: sch.lr.value(s as usize)?,
            wd: sch.wd.value(s as usize)?,
            lambda: sch.lambda.value(s as usize)?,
            tau_t: sch.tau_t.value(s as usize)?,
        };
        let stats =
            train_step(&cfg.model, &cfg.distill, &mut student, &mut state, &mut opt, &views, &hp)?;
        // serde_json turns non-finite floats into null, so the record of a
        // diverged step still parses
        let line = json!({
            "step": s + 1,
            "epoch": epoch,
            "loss": stats.loss,
            "h": stats.h,
            "kl": stats.kl,
            "ce": stats.ce,
            "lr": hp.lr,
            "wd": hp.wd,
            "lambda": hp.lambda,
            "tau_t": hp.tau_t,
        });
        writeln!(metrics, "{line}")?;
        if !stats.loss.is_finite() {
            metrics.flush()?;
            return Err(Error::Numeric(format!(
                "non-finite loss at step {} (h={}, kl={}); aborting",
                s + 1,
                stats.h,
                stats.kl
            )));
        }
        last_loss = stats.loss;

        if cfg.eval_every > 0 && (s + 1) % cfg.eval_every as u64 == 0 {
            let (bank_ds, query_ds) = eval_sets.as_ref().unwrap();
            let t_acc = snapshot_knn(&cfg.model, &state.teacher, bank_ds, query_ds, cfg.eval_layers)?;
            let s_acc = snapshot_knn(&cfg.model, &student, bank_ds, query_ds, cfg.eval_layers)?;
            let line = json!({
                "step": s + 1,
                "teacher_knn": t_acc,
                "student_knn": s_acc,
            });
            writeln!(eval_log, "{line}")?;
            eval_log.flush()?;
        }
        if cfg.ckpt_every > 0
            && (s + 1) % cfg.ckpt_every as u64 == 0
            && (s + 1) < total_steps as u64
        {
            metrics.flush()?;
            let ck = snapshot_ckpt(&config_text, s + 1, epoch, &student, &state, &opt);
            save_checkpoint(&out_dir.join(format!("ckpt-{:06}.dck", s + 1)), &ck)?;
        }
    }
    metrics.flush()?;
    eval_log.flush()?;

    let final_path = out_dir.join("final.dck");
    let ck = snapshot_ckpt(
        &config_text,
        total_steps as u64,
        cfg.epochs.saturating_sub(1) as u64,
        &student,
        &state,
        &opt,
    );
    save_checkpoint(&final_path, &ck)?;
    Ok(TrainOutcome {
        steps_run: total_steps as u64 - start_step,
        final_loss: last_loss,
        final_ckpt: final_path,
    })
}

/// Which stabilizer(s) the collapse demonstration removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollapseMode {
    /// Centering off (center frozen at zero), sharpening on.
    NoCenter,
    /// Sharpening off (teacher temperature 1), centering on.
    NoSharpen,
    /// Both stabilizers on — the healthy control.
    Both,
}

impl CollapseMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "no-center" => Ok(Self::NoCenter),
            "no-sharpen" => Ok(Self::NoSharpen),
            "both" => Ok(Self::Both),
            other => Err(Error::Param(format!(
                "unknown collapse mode {other:?} (no-center, no-sharpen, both)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::NoCenter => "no-center",
            Self::NoSharpen => "no-sharpen",
            Self::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CollapseRow {
    pub step: u64,
    pub h: f64,
    pub kl: f64,
    pub ce: f64,
    pub loss: f64,
}

/// Small self-contained run that shows why both stabilizers exist: with
/// centering disabled the teacher's entropy falls toward zero (one
/// prototype wins); with sharpening disabled it rises to log K (uniform);
/// in both failure modes the KL between teacher targets and student
/// predictions dies, i.e. the targets stop carrying information. With both
/// enabled KL stays bounded away from zero. `center_m` overrides the center
/// momentum (the ablation knob); `None` keeps the mode's default. Writes
/// `step,h,kl,ce,loss` CSV when `out` is given and returns the rows either
/// way.
pub fn run_collapse_demo(
    mode: CollapseMode,
    steps: usize,
    seed: u64,
    center_m: Option<f64>,
    out: Option<&Path>,
) -> Result<Vec<CollapseRow>> {
    if steps == 0 {
        return Err(Error::Param("need at least one step".into()));
    }
    let mcfg = ModelConfig {
        vit: ViTConfig {
            patch_size: 4,
            depth: 2,
            dim: 32,
            heads: 4,
            mlp_ratio: 2,
            base_grid: 4,
            in_chans: 3,
        },
        head: HeadConfig { mlp_layers: 3, hidden_dim: 64, bottleneck_dim: 16, out_dim: 32 },
    };
    // flat teacher momentum: ramping lambda to 1 inside a 2000-step demo
    // freezes the teacher halfway through, which reads as "student matched
    // teacher" rather than anything about the stabilizers
    let mut dcfg = DistillConfig {
        teacher_norm: TeacherNorm::Centering,
        lambda_final: DistillConfig::toy().lambda_base,
        // flat sharp temperature: the short run never leaves the warmup
        // regime, and the teacher needs real contrast for its targets to
        // carry any information at this scale
        tau_t_start: 0.04,
        tau_t_end: 0.04,
        ..DistillConfig::toy()
    };
    match mode {
        CollapseMode::NoCenter => dcfg.center_m = 1.0, // center never leaves zero
        CollapseMode::NoSharpen => {
            dcfg.tau_t_start = 1.0;
            dcfg.tau_t_end = 1.0;
        }
        CollapseMode::Both => {}
    }
    if let Some(m) = center_m {
        dcfg.center_m = m;
    }
    dcfg.validate()?;
    // local crops keep the cross-view task hard; without them the student
    // nearly matches the teacher and every mode's kl goes to zero
    let vcfg = ViewConfig {
        n_local: 2,
        global_size: 16,
        local_size: 8,
        ..ViewConfig::toy()
    };
    let spec = ToySpec { n_per_class: 64, side: 16, ..ToySpec::default_train() };
    let ds = gen_toy(&ToySpec { seed, ..spec }, 0, "demo")?;

    let batch = 8usize;
    let mut student = mcfg.init_params::<f32>(&mut stream(seed, DOMAIN_INIT, 0, 0))?;
    let mut state = DistillState::new(&student, mcfg.head.out_dim);
    let mut opt = AdamW::new(&student, decay_filter);
    let steps_per_epoch = ds.n.div_ceil(batch);
    // absolute rate, not the per-256 scaling rule: at batch 8 the rule
    // gives 1.6e-5, which cannot move the network inside 2000 steps
    let lr = Schedule::constant(2e-5, steps);
    let lam = dcfg.momentum_schedule(steps);
    let tau_t = dcfg.teacher_temp_schedule(steps);

    let mut rows = Vec::with_capacity(steps);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut batches_epoch = u64::MAX;
    for s in 0..steps as u64 {
        let epoch = s / steps_per_epoch as u64;
        let slot = (s % steps_per_epoch as u64) as usize;
        if epoch != batches_epoch {
            batches = epoch_batches(ds.n, batch, seed, epoch)?;
            batches_epoch = epoch;
        }
        let mut views = Vec::with_capacity(batches[slot].len());
        for &i in &batches[slot] {
            let mut rng = stream(seed, DOMAIN_VIEWS, epoch, i as u64);
            views.push(make_views(&ds.image(i), &vcfg, &mut rng)?);
        }
        let hp = StepHyper {
            lr: lr.value(s as usize)?,
            wd: 0.0,
            lambda: lam.value(s as usize)?,
            tau_t: tau_t.value(s as usize)?,
        };
        let stats = train_step(&mcfg, &dcfg, &mut student, &mut state, &mut opt, &views, &hp)?;
        rows.push(CollapseRow {
            step: s + 1,
            h: stats.h,
            kl: stats.kl,
            ce: stats.ce,
            loss: stats.loss,
        });
    }
    if let Some(path) = out {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "step,h,kl,ce,loss")?;
        for r in &rows {
            writeln!(w, "{},{},{},{},{}", r.step, r.h, r.kl, r.ce, r.loss)?;
        }
        w.flush()?;
    }
    Ok(rows)
}
