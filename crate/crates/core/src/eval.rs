//! Frozen-feature evaluation: feature banks, weighted k-NN, a linear probe,
//! retrieval mAP, and attention-mass masks with Jaccard scoring.
//!
//! Everything here is read-only over models and banks, and all similarity is
//! cosine: bank rows are l2-normalized once at construction so dot products
//! are the whole story afterwards.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::ops;
use crate::params::ParamSet;
use crate::rng::{permutation, stream, DOMAIN_EVAL};
use crate::scalar::Scalar;
use crate::schedule::Schedule;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vit::{cls_concat, vit_forward, VitOut};

/// L2-normalized feature rows with their labels.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    feats: Tensor<f64>,
    pub labels: Vec<u16>,
    pub n_classes: usize,
}

impl FeatureBank {
    /// Normalizes every row to unit length (zero rows are left at zero).
    pub fn from_rows(feats: Tensor<f64>, labels: Vec<u16>, n_classes: usize) -> Result<Self> {
        let (n, _) = feats.dims2()?;
        if labels.len() != n {
            return Err(Error::Param(format!("{n} feature rows but {} labels", labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::Param(format!("label {l} out of range for {n_classes} classes")));
        }
        let feats = ops::l2_normalize_rows(&feats, 0.0)?;
        Ok(Self { feats, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feats.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.feats.row(i)
    }

    pub fn feats(&self) -> &Tensor<f64> {
        &self.feats
    }
}

/// Forward every image at its stored size (no augmentation, no cropping) and
/// take the last `l` per-block CLS outputs, deepest first, as the
/// representation. D = l * dim.
pub fn extract_features<T: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<T>,
    ds: &Dataset,
    l: usize,
) -> Result<FeatureBank> {
    let d = l * cfg.vit.dim;
    let mut rows = Vec::with_capacity(ds.n * d);
    for i in 0..ds.n {
        let img = ds.image(i).to_tensor::<T>();
        let mut tape = Tape::inference();
        let bound = params.bind_frozen(&mut tape);
        let out = vit_forward(&mut tape, &cfg.vit, &bound, &img, false)?;
        let per_layer: Vec<Tensor<T>> =
            out.per_layer_cls.iter().map(|&id| tape.value(id).clone()).collect();
        let rep = cls_concat(&per_layer, l)?;
        rows.extend(rep.data().iter().map(|v| v.to_f64()));
    }
    let feats = Tensor::from_vec(vec![ds.n, d], rows)?;
    FeatureBank::from_rows(feats, ds.labels.clone(), ds.n_classes())
}

/// Raw pixels as features — the no-learning control every learned
/// representation has to beat.
pub fn pixel_bank(ds: &Dataset) -> Result<FeatureBank> {
    let d = ds.c * ds.h * ds.w;
    let data: Vec<f64> = ds.pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let feats = Tensor::from_vec(vec![ds.n, d], data)?;
    FeatureBank::from_rows(feats, ds.labels.clone(), ds.n_classes())
}

/// Similarity-sorted bank indices for one query: descending dot product,
/// ties by lower index.
fn ranked_indices(bank: &FeatureBank, query: &[f64]) -> Vec<(usize, f64)> {
    let mut sims: Vec<(usize, f64)> =
        (0..bank.len()).map(|i| (i, ops::dot(bank.row(i), query))).collect();
    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    sims
}

/// Weighted k-nearest-neighbor vote: each of the top-k rows contributes
/// exp(similarity / tau) to its class. Ties at the class level go to the
/// lowest class id.
pub fn knn_classify(
    bank: &FeatureBank,
    query: &[f64],
    k: usize,
    tau: f64,
) -> Result<(u16, Vec<f64>)> {
    if bank.is_empty() {
        return Err(Error::Contract("k-NN against an empty bank".into()));
    }
    if k == 0 || k > bank.len() {
        return Err(Error::Param(format!("k={k} outside 1..={}", bank.len())));
    }
    if tau <= 0.0 {
        return Err(Error::Param(format!("k-NN temperature {tau} <= 0")));
    }
    if query.len() != bank.dim() {
        return Err(Error::shape("knn_classify", format!("query {} vs bank {}", query.len(), bank.dim())));
    }
    let ranked = ranked_indices(bank, query);
    let mut scores = vec![0.0f64; bank.n_classes];
    for &(i, sim) in ranked.iter().take(k) {
        scores[bank.labels[i] as usize] += (sim / tau).exp();
    }
    let mut best = 0usize;
    for c in 1..scores.len() {
        if scores[c] > scores[best] {
            best = c;
        }
    }
    Ok((best as u16, scores))
}

pub const KNN_DEFAULT_K: usize = 20;
pub const KNN_DEFAULT_TAU: f64 = 0.07;

/// Fraction of test rows the k-NN vote labels correctly.
pub fn knn_eval(train: &FeatureBank, test: &FeatureBank, k: usize, tau: f64) -> Result<f64> {
    if train.dim() != test.dim() {
        return Err(Error::shape("knn_eval", format!("{} vs {}", train.dim(), test.dim())));
    }
    let mut hits = 0usize;
    for i in 0..test.len() {
        let (label, _) = knn_classify(train, test.row(i), k, tau)?;
        if label == test.labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len().max(1) as f64)
}

/// Single linear layer + softmax cross-entropy on frozen features, plain SGD
/// with cosine learning-rate decay, no weight decay, no augmentation.
/// Returns test accuracy.
pub fn linear_probe(
    train: &FeatureBank,
    test: &FeatureBank,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    if train.dim() != test.dim() {
        return Err(Error::shape("linear_probe", format!("{} vs {}", train.dim(), test.dim())));
    }
    if batch == 0 {
        return Err(Error::Param("probe batch size must be at least 1".into()));
    }
    let (n, d) = (train.len(), train.dim());
    let c = train.n_classes;
    let mut w = Tensor::<f64>::zeros(vec![d, c]);
    let mut b = Tensor::<f64>::zeros(vec![1, c]);
    let steps_per_epoch = n.div_ceil(batch);
    let total_steps = (epochs * steps_per_epoch).max(1);
    let sched = Schedule::cosine(lr, 0.0, total_steps);
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut rng = stream(seed, DOMAIN_EVAL, epoch as u64, 0);
        let order = permutation(n, &mut rng);
        for chunk in order.chunks(batch) {
            let bsz = chunk.len();
            let mut xd = Vec::with_capacity(bsz * d);
            let mut y = Tensor::<f64>::zeros(vec![bsz, c]);
            for (r, &i) in chunk.iter().enumerate() {
                xd.extend_from_slice(train.row(i));
                y.data_mut()[r * c + train.labels[i] as usize] = 1.0;
            }
            let x = Tensor::from_vec(vec![bsz, d], xd)?;
            let logits = ops::add_row(&ops::matmul(&x, &w)?, &b)?;
            let p = ops::softmax_rows(&logits, 1.0)?;
            let resid = ops::sub(&p, &y)?;
            let gw = ops::scale(&ops::matmul_tn(&x, &resid)?, 1.0 / bsz as f64);
            let lr_t = sched.value(step)?;
            step += 1;
            {
                let wd = w.data_mut();
                let gd = gw.data();
                for i in 0..wd.len() {
                    wd[i] -= lr_t * gd[i];
                }
                let bd = b.data_mut();
                let rd = resid.data();
                for j in 0..c {
                    let mut g = 0.0;
                    for r in 0..bsz {
                        g += rd[r * c + j];
                    }
                    bd[j] -= lr_t * g / bsz as f64;
                }
            }
        }
    }
    // accuracy: argmax logits, ties to the lower class id
    let logits = ops::add_row(&ops::matmul(test.feats(), &w)?, &b)?;
    let mut hits = 0usize;
    for i in 0..test.len() {
        let row = logits.row(i);
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best as u16 == test.labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / test.len().max(1) as f64)
}

/// Mean average precision for similarity ranking. `relevance[q]` lists the
/// bank indices relevant to query q; queries with empty relevance are
/// skipped, and all-empty relevance is a caller bug.
pub fn retrieval_map(
    bank: &FeatureBank,
    queries: &FeatureBank,
    relevance: &[Vec<usize>],
) -> Result<f64> {
    if bank.dim() != queries.dim() {
        return Err(Error::shape("retrieval_map", format!("{} vs {}", bank.dim(), queries.dim())));
    }
    if relevance.len() != queries.len() {
        return Err(Error::Param(format!(
            "{} relevance sets for {} queries",
            relevance.len(),
            queries.len()
        )));
    }
    if relevance.iter().all(|r| r.is_empty()) {
        return Err(Error::Contract("every query has empty relevance".into()));
    }
    let mut ap_sum = 0.0;
    let mut n_scored = 0usize;
    for (q, rel) in relevance.iter().enumerate() {
        if rel.is_empty() {
            continue;
        }
        if let Some(&bad) = rel.iter().find(|&&i| i >= bank.len()) {
            return Err(Error::Param(format!("relevant id {bad} outside bank of {}", bank.len())));
        }
        let relevant: std::collections::HashSet<usize> = rel.iter().copied().collect();
        let ranked = ranked_indices(bank, queries.row(q));
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank0, &(i, _)) in ranked.iter().enumerate() {
            if relevant.contains(&i) {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
            }
        }
        ap_sum += precision_sum / relevant.len() as f64;
        n_scored += 1;
    }
    Ok(ap_sum / n_scored as f64)
}

/// The patches an attention row concentrates on: renormalize over patch
/// tokens, sort descending (ties to the lower index), keep the smallest
/// prefix whose mass reaches the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskResult {
    pub keep: Vec<bool>,
    pub grid: usize,
    pub kept: usize,
    pub kept_mass: f64,
}

pub fn attention_mask(weights: &[f64], mass: f64) -> Result<MaskResult> {
    if !(mass > 0.0 && mass <= 1.0) {
        return Err(Error::Param(format!("mass {mass} outside (0, 1]")));
    }
    let n = weights.len();
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n {
        return Err(Error::Param(format!("{n} patch weights do not form a square grid")));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Numeric("attention weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numeric("attention row has no mass".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        weights[b].partial_cmp(&weights[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut keep = vec![false; n];
    let mut acc = 0.0;
    let mut kept = 0usize;
    for &i in &order {
        keep[i] = true;
        kept += 1;
        acc += weights[i] / total;
        if acc >= mass {
            break;
        }
    }
    Ok(MaskResult { keep, grid, kept, kept_mass: acc })
}

/// CLS-query attention over patch tokens for one recorded (layer, head):
/// row 0 of the weights with the CLS self-weight dropped. `attention_mask`
/// renormalizes, so the dropped weight needs no compensation.
pub fn cls_patch_attention<T: Scalar>(out: &VitOut<T>, layer: usize, head: usize) -> Result<Vec<f64>> {
    let rec = out
        .attn
        .iter()
        .find(|r| r.layer == layer && r.head == head)
        .ok_or_else(|| Error::Param(format!("no recorded attention for layer {layer} head {head}")))?;
    let (t, _) = rec.weights.dims2()?;
    Ok(rec.weights.row(0)[1..t].iter().map(|v| v.to_f64()).collect())
}

/// Intersection over union of two same-shape boolean masks; two empty masks
/// count as identical (1).
pub fn jaccard(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("jaccard", format!("{} vs {}", a.len(), b.len())));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Downsample a pixel mask to the patch grid: a cell is set when at least
/// half of its pixels are set.
pub fn mask_to_patch_grid(mask: &[bool], side: usize, patch: usize) -> Result<Vec<bool>> {
    if mask.len() != side * side {
        return Err(Error::Param(format!("mask of {} pixels is not {side}x{side}", mask.len())));
    }
    if patch == 0 || side % patch != 0 {
        return Err(Error::Param(format!("side {side} not divisible by patch {patch}")));
    }
    let grid = side / patch;
    let mut out = vec![false; grid * grid];
    for gy in 0..grid {
        for gx in 0..grid {
            let mut count = 0usize;
            for dy in 0..patch {
                for dx in 0..patch {
                    count += mask[(gy * patch + dy) * side + gx * patch + dx] as usize;
                }
            }
            out[gy * grid + gx] = 2 * count >= patch * patch;
        }
    }
    Ok(out)
}
