//! Self-distillation between a gradient-trained student and a momentum
//! teacher: the teacher-side target normalizations, the multi-view
//! cross-entropy objective, and the composed training step.
//!
//! The teacher never sits on a recording tape — its stop-gradient is
//! structural, not an op. Teacher-side math runs host-side in f64 regardless
//! of the training dtype.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::model::image_logits;
use crate::ops;
use crate::optim::AdamW;
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::schedule::Schedule;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use crate::views::ViewSet;

/// How teacher logits become target distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherNorm {
    /// Running-mean centering then sharpened row softmax (the default).
    Centering,
    /// Iterative row/column balancing across the joint global-view batch.
    Sinkhorn,
    /// Column softmax then row renormalization — one balancing sweep.
    SoftmaxBatch,
}

impl TeacherNorm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "centering" => Ok(Self::Centering),
            "sinkhorn" => Ok(Self::Sinkhorn),
            "softmax_batch" => Ok(Self::SoftmaxBatch),
            other => Err(Error::Param(format!("unknown teacher normalization {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Centering => "centering",
            Self::Sinkhorn => "sinkhorn",
            Self::SoftmaxBatch => "softmax_batch",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub tau_s: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    /// Fraction of total steps over which the teacher temperature ramps
    /// linearly from start to end.
    pub tau_t_warmup_frac: f64,
    pub center_m: f64,
    pub lambda_base: f64,
    pub lambda_final: f64,
    pub teacher_norm: TeacherNorm,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tau: f64,
}

impl DistillConfig {
    pub fn toy() -> Self {
        Self {
            tau_s: 0.1,
            tau_t_start: 0.04,
            tau_t_end: 0.07,
            tau_t_warmup_frac: 0.3,
            center_m: 0.9,
            lambda_base: 0.996,
            lambda_final: 1.0,
            teacher_norm: TeacherNorm::Centering,
            sinkhorn_iters: 3,
            sinkhorn_tau: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("student temperature", self.tau_s),
            ("teacher temperature start", self.tau_t_start),
            ("teacher temperature end", self.tau_t_end),
            ("balancing temperature", self.sinkhorn_tau),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Param(format!("{what} {v} must be positive")));
            }
        }
        for (what, v) in [
            ("center momentum", self.center_m),
            ("teacher momentum base", self.lambda_base),
            ("teacher momentum final", self.lambda_final),
            ("teacher temperature warmup fraction", self.tau_t_warmup_frac),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Param(format!("{what} {v} outside [0, 1]")));
            }
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::Param("need at least one balancing iteration".into()));
        }
        Ok(())
    }

    /// Teacher temperature: linear ramp start -> end over the warmup
    /// fraction, constant afterwards.
    pub fn teacher_temp_schedule(&self, total_steps: usize) -> Schedule {
        let warm = (total_steps as f64 * self.tau_t_warmup_frac).round() as usize;
        Schedule::constant(self.tau_t_end, total_steps).with_warmup(warm, self.tau_t_start)
    }

    /// Teacher momentum: cosine base -> final over the whole run.
    pub fn momentum_schedule(&self, total_steps: usize) -> Schedule {
        Schedule::cosine(self.lambda_base, self.lambda_final, total_steps)
    }
}

/// The teacher's side of training: its parameters and the running center.
/// The center stays f64 no matter what the network trains in.
#[derive(Debug, Clone)]
pub struct DistillState<T> {
    pub teacher: ParamSet<T>,
    pub center: Tensor<f64>,
}

impl<T: Scalar> DistillState<T> {
    /// Teacher starts as a copy of the student; center starts at zero.
    pub fn new(student: &ParamSet<T>, out_dim: usize) -> Self {
        Self { teacher: student.clone(), center: Tensor::zeros(vec![1, out_dim]) }
    }
}

/// The (teacher view, student view) pairs the objective averages over:
/// every view of the student against each global view of the teacher,
/// excluding the matching view. Count is 2(V-1).
pub fn loss_pairs(n_views: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(2 * n_views.saturating_sub(1));
    for t in 0..2 {
        for s in 0..n_views {
            if s != t {
                pairs.push((t, s));
            }
        }
    }
    pairs
}

/// Balanced assignment of rows to columns: exponentiate at `tau`, then
/// alternately divide each column by its sum and each row by its sum,
/// ending on rows so every output row is a distribution. At the fixed point
/// the column sums equal M/K — no single prototype can absorb the batch.
///
/// The exponent subtracts each column's max first; the shift cancels at the
/// first column division but keeps every column's largest entry at
/// exp(0)=1, so extreme logits can't underflow a whole column to zero.
pub fn sinkhorn(logits: &Tensor<f64>, tau: f64, iters: usize) -> Result<Tensor<f64>> {
    if tau <= 0.0 {
        return Err(Error::Param(format!("balancing temperature {tau} <= 0")));
    }
    if iters == 0 {
        return Err(Error::Param("need at least one balancing iteration".into()));
    }
    let (m, k) = logits.dims2()?;
    let mut q = Tensor::<f64>::zeros(vec![m, k]);
    {
        let src = logits.data();
        let dst = q.data_mut();
        for j in 0..k {
            let mut mx = f64::NEG_INFINITY;
            for i in 0..m {
                mx = mx.max(src[i * k + j]);
            }
            for i in 0..m {
                dst[i * k + j] = ((src[i * k + j] - mx) / tau).exp();
            }
        }
    }
    let d = q.data_mut();
    for _ in 0..iters {
        for j in 0..k {
            let mut s = 0.0;
            for i in 0..m {
                s += d[i * k + j];
            }
            for i in 0..m {
                d[i * k + j] /= s;
            }
        }
        for i in 0..m {
            let row = &mut d[i * k..(i + 1) * k];
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
        }
    }
    Ok(q)
}

/// One-sweep batch normalization: softmax over each column (competition
/// between rows for a prototype), then renormalize each row into a
/// distribution. Written independently of `sinkhorn`; a single balancing
/// iteration there lands on the same map.
pub fn softmax_batch(logits: &Tensor<f64>, tau: f64) -> Result<Tensor<f64>> {
    if tau <= 0.0 {
        return Err(Error::Param(format!("balancing temperature {tau} <= 0")));
    }
    let (m, k) = logits.dims2()?;
    let src = logits.data();
    let mut p = Tensor::<f64>::zeros(vec![m, k]);
    let d = p.data_mut();
    for j in 0..k {
        let mut mx = f64::NEG_INFINITY;
        for i in 0..m {
            mx = mx.max(src[i * k + j]);
        }
        let mut s = 0.0;
        for i in 0..m {
            let e = ((src[i * k + j] - mx) / tau).exp();
            d[i * k + j] = e;
            s += e;
        }
        for i in 0..m {
            d[i * k + j] /= s;
        }
    }
    for i in 0..m {
        let row = &mut d[i * k..(i + 1) * k];
        let s: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(p)
}

/// Teacher logits -> target distributions, one row per (view, sample).
/// Centering subtracts the running center and sharpens row-wise; the batch
/// variants balance jointly across all rows and ignore `center`/`tau_t`.
pub fn teacher_targets(
    cfg: &DistillConfig,
    center: &Tensor<f64>,
    tau_t: f64,
    raw: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    match cfg.teacher_norm {
        TeacherNorm::Centering => {
            let neg_center = ops::scale(center, -1.0);
            let shifted = ops::add_row(raw, &neg_center)?;
            ops::softmax_rows(&shifted, tau_t)
        }
        TeacherNorm::Sinkhorn => sinkhorn(raw, cfg.sinkhorn_tau, cfg.sinkhorn_iters),
        TeacherNorm::SoftmaxBatch => softmax_batch(raw, cfg.sinkhorn_tau),
    }
}

/// Running-mean center update from RAW teacher logits (before any
/// normalization): c <- m*c + (1-m) * column mean.
pub fn update_center(center: &mut Tensor<f64>, raw: &Tensor<f64>, m: f64) -> Result<()> {
    let (rows, k) = raw.dims2()?;
    if center.shape() != [1, k] {
        return Err(Error::shape(
            "update_center",
            format!("center {:?} vs logits width {k}", center.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Param(format!("center momentum {m} outside [0, 1]")));
    }
    let src = raw.data();
    let c = center.data_mut();
    for j in 0..k {
        let mut s = 0.0;
        for i in 0..rows {
            s += src[i * k + j];
        }
        c[j] = m * c[j] + (1.0 - m) * (s / rows as f64);
    }
    Ok(())
}

/// Blend the teacher toward the student: t <- lambda*t + (1-lambda)*s. At
/// lambda = 1 the teacher is left bitwise untouched.
pub fn ema_update<T: Scalar>(
    teacher: &mut ParamSet<T>,
    student: &ParamSet<T>,
    lambda: f64,
) -> Result<()> {
    if !teacher.same_structure(student) {
        return Err(Error::Contract("teacher/student parameter structures diverged".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Param(format!("momentum {lambda} outside [0, 1]")));
    }
    if lambda == 1.0 {
        return Ok(());
    }
    let lam = T::from_f64(lambda);
    let com = T::from_f64(1.0 - lambda);
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        let td = t.data_mut();
        let sd = s.data();
        for i in 0..td.len() {
            td[i] = lam * td[i] + com * sd[i];
        }
    }
    Ok(())
}

/// The distillation objective on the tape. `student_views` holds one
/// [B x K] logits node per view (globals first); `targets` stacks the two
/// teacher target blocks as [2B x K] (view-major rows). The result averages
/// -sum(target * log-softmax(student / tau_s)) over all pairs and rows.
pub fn dino_loss<T: Scalar>(
    tape: &mut Tape<T>,
    student_views: &[TensorId],
    targets: &Tensor<T>,
    tau_s: f64,
) -> Result<TensorId> {
    let v = student_views.len();
    if v < 2 {
        return Err(Error::Param(format!("need at least 2 views, got {v}")));
    }
    let (rows2, k) = targets.dims2()?;
    if rows2 % 2 != 0 {
        return Err(Error::shape("dino_loss", format!("target rows {rows2} not even")));
    }
    let b = rows2 / 2;
    for (i, &id) in student_views.iter().enumerate() {
        let shape = tape.value(id).shape();
        if shape != [b, k] {
            return Err(Error::shape(
                "dino_loss",
                format!("view {i} logits {shape:?}, want [{b}, {k}]"),
            ));
        }
    }
    let blocks = [
        tape.constant(ops::narrow_rows(targets, 0, b)?),
        tape.constant(ops::narrow_rows(targets, b, b)?),
    ];
    let mut log_p = Vec::with_capacity(v);
    for &id in student_views {
        log_p.push(tape.log_softmax(id, tau_s)?);
    }
    let pairs = loss_pairs(v);
    let mut terms = Vec::with_capacity(pairs.len());
    for &(t, s) in &pairs {
        let prod = tape.mul(blocks[t], log_p[s])?;
        terms.push(tape.sum_all(prod));
    }
    let total = tape.add_n(&terms)?;
    Ok(tape.scale(total, -1.0 / (pairs.len() as f64 * b as f64)))
}

/// Collapse diagnostics, in nats, averaged over the same (teacher, student)
/// pairs the loss uses. `h` is target entropy (0 ln 0 = 0), `ce` the cross
/// entropy against the student (probabilities floored at 1e-12 inside the
/// log), `kl` their divergence computed from its own formula — ce = h + kl
/// is an identity these satisfy, not a definition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollapseStats {
    pub h: f64,
    pub kl: f64,
    pub ce: f64,
}

pub fn collapse_metrics(
    targets: &Tensor<f64>,
    student_logits: &[Tensor<f64>],
    tau_s: f64,
) -> Result<CollapseStats> {
    let v = student_logits.len();
    if v < 2 {
        return Err(Error::Param(format!("need at least 2 views, got {v}")));
    }
    let (rows2, k) = targets.dims2()?;
    let b = rows2 / 2;
    let mut probs = Vec::with_capacity(v);
    for s in student_logits {
        let (sb, sk) = s.dims2()?;
        if (sb, sk) != (b, k) {
            return Err(Error::shape(
                "collapse_metrics",
                format!("student logits [{sb}, {sk}] vs targets [{b}, {k}]"),
            ));
        }
        probs.push(ops::softmax_rows(s, tau_s)?);
    }
    let (mut h_sum, mut kl_sum, mut ce_sum) = (0.0, 0.0, 0.0);
    let mut n_rows = 0usize;
    for (t, s) in loss_pairs(v) {
        for i in 0..b {
            let pt = targets.row(t * b + i);
            let ps = probs[s].row(i);
            for j in 0..k {
                let p = pt[j];
                if p > 0.0 {
                    let lq = ps[j].max(1e-12).ln();
                    h_sum -= p * p.ln();
                    ce_sum -= p * lq;
                    kl_sum += p * (p.ln() - lq);
                }
            }
            n_rows += 1;
        }
    }
    let n = n_rows as f64;
    Ok(CollapseStats { h: h_sum / n, kl: kl_sum / n, ce: ce_sum / n })
}

/// Per-step hyperparameters, already evaluated from their schedules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepHyper {
    pub lr: f64,
    pub wd: f64,
    pub lambda: f64,
    pub tau_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub h: f64,
    pub kl: f64,
    pub ce: f64,
    pub n_views: usize,
}

/// One complete training step, in strict phase order: teacher forwards
/// (inference tapes) -> targets -> student forwards + backward (recording
/// tape) -> optimizer -> teacher EMA -> center update. The center sees raw
/// teacher logits; it moves only under the centering normalization.
pub fn train_step<T: Scalar>(
    mcfg: &ModelConfig,
    dcfg: &DistillConfig,
    student: &mut ParamSet<T>,
    state: &mut DistillState<T>,
    opt: &mut AdamW<T>,
    batch: &[ViewSet],
    hp: &StepHyper,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Param("empty batch".into()));
    }
    let v_count = batch[0].len();
    if v_count < 2 {
        return Err(Error::Param("each sample needs both global views".into()));
    }
    if batch.iter().any(|vs| vs.len() != v_count) {
        return Err(Error::Param("ragged view counts within a batch".into()));
    }

    // teacher phase: the two global views, no gradient anywhere
    let mut blocks: Vec<Tensor<f64>> = Vec::with_capacity(2);
    for v in 0..2 {
        let mut tape = Tape::inference();
        let bound = state.teacher.bind_frozen(&mut tape);
        let mut rows = Vec::with_capacity(batch.len());
        for vs in batch {
            let img = vs.views[v].to_tensor::<T>();
            let (_, logits) = image_logits(&mut tape, mcfg, &bound, &img, false)?;
            rows.push(tape.value(logits).cast::<f64>());
        }
        let refs: Vec<&Tensor<f64>> = rows.iter().collect();
        blocks.push(ops::concat_rows(&refs)?);
    }
    let raw_teacher = ops::concat_rows(&[&blocks[0], &blocks[1]])?;
    let targets = teacher_targets(dcfg, &state.center, hp.tau_t, &raw_teacher)?;

    // student phase: every view on one recording tape
    let mut tape = Tape::recording();
    let bound = student.bind(&mut tape);
    let mut view_ids = Vec::with_capacity(v_count);
    for v in 0..v_count {
        let mut rows = Vec::with_capacity(batch.len());
        for vs in batch {
            let img = vs.views[v].to_tensor::<T>();
            let (_, logits) = image_logits(&mut tape, mcfg, &bound, &img, false)?;
            rows.push(logits);
        }
        view_ids.push(tape.concat_rows(&rows)?);
    }
    let loss_id = dino_loss(&mut tape, &view_ids, &targets.cast::<T>(), dcfg.tau_s)?;
    let loss = tape.value(loss_id).item()?.to_f64();
    let student_f64: Vec<Tensor<f64>> =
        view_ids.iter().map(|&id| tape.value(id).cast::<f64>()).collect();
    tape.backward(loss_id)?;
    let grads: Vec<Tensor<T>> = bound
        .ids()
        .iter()
        .zip(student.iter())
        .map(|(&id, (_, p))| {
            tape.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();
    drop(tape);

    opt.step(student, &grads, hp.lr, hp.wd)?;
    ema_update(&mut state.teacher, student, hp.lambda)?;
    if dcfg.teacher_norm == TeacherNorm::Centering {
        update_center(&mut state.center, &raw_teacher, dcfg.center_m)?;
    }
    let stats = collapse_metrics(&targets, &student_f64, dcfg.tau_s)?;
    Ok(StepStats { loss, h: stats.h, kl: stats.kl, ce: stats.ce, n_views: v_count })
}
