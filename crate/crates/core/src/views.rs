//! Multi-crop view generation: two large-scale global crops plus several
//! small local crops, each pushed through flip / color jitter / blur /
//! solarize with a fixed draw order so a seed pins the whole view set.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::uniform;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewConfig {
    pub n_local: usize,
    pub global_size: usize,
    pub local_size: usize,
    /// Crop-scale split point s: globals sample area fraction from (s, 1),
    /// locals from (local_scale_min, s).
    pub scale_split: f64,
    pub local_scale_min: f64,
    pub flip_p: f64,
    pub jitter_p: f64,
    /// Brightness / contrast / saturation strengths.
    pub jitter_strengths: (f64, f64, f64),
    /// Blur probabilities: first global, second global, locals.
    pub blur_p: (f64, f64, f64),
    pub blur_sigma: (f64, f64),
    /// Solarization applies to the second global view only.
    pub solarize_p: f64,
    pub solarize_threshold: f64,
    pub ratio: (f64, f64),
}

impl ViewConfig {
    pub fn toy() -> Self {
        Self {
            n_local: 6,
            global_size: 32,
            local_size: 16,
            scale_split: 0.3,
            local_scale_min: 0.05,
            flip_p: 0.5,
            jitter_p: 0.8,
            jitter_strengths: (0.4, 0.4, 0.2),
            blur_p: (1.0, 0.1, 0.5),
            blur_sigma: (0.1, 2.0),
            solarize_p: 0.2,
            solarize_threshold: 0.5,
            ratio: (0.75, 4.0 / 3.0),
        }
    }

    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if !(self.local_scale_min < self.scale_split && self.scale_split < 1.0) {
            return Err(Error::Param(format!(
                "scale split {} must lie in ({}, 1)",
                self.scale_split, self.local_scale_min
            )));
        }
        for (what, size) in [("global", self.global_size), ("local", self.local_size)] {
            if size == 0 || size % patch_size != 0 {
                return Err(Error::Param(format!(
                    "{what} view size {size} not divisible by patch size {patch_size}"
                )));
            }
        }
        if self.ratio.0 <= 0.0 || self.ratio.0 > self.ratio.1 {
            return Err(Error::Param("bad aspect-ratio range".into()));
        }
        Ok(())
    }
}

/// Source rectangle and flip flag of one generated view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropMeta {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub flipped: bool,
}

/// The view set V. Slots 0 and 1 are always the global views.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub views: Vec<Image>,
    pub meta: Vec<CropMeta>,
    pub n_local: usize,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn globals(&self) -> &[Image] {
        &self.views[..2]
    }
}

/// Sample a crop rectangle: target area = source area * U(scale), aspect
/// ratio log-uniform in `ratio`; up to 10 attempts to fit, then a clamped
/// center crop. Returns (x0, y0, w, h).
pub fn sample_crop_rect(
    src_h: usize,
    src_w: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> (usize, usize, usize, usize) {
    let area = (src_h * src_w) as f64;
    for _ in 0..10 {
        let target_area = area * uniform(rng, scale.0, scale.1);
        let aspect = libm::exp(uniform(rng, libm::log(ratio.0), libm::log(ratio.1)));
        let w = libm::sqrt(target_area * aspect).round() as usize;
        let h = libm::sqrt(target_area / aspect).round() as usize;
        if w >= 1 && w <= src_w && h >= 1 && h <= src_h {
            let y0 = rng.gen_range(0..=src_h - h);
            let x0 = rng.gen_range(0..=src_w - w);
            return (x0, y0, w, h);
        }
    }
    // fallback: central crop at the nearest representable aspect
    let in_ratio = src_w as f64 / src_h as f64;
    let (w, h) = if in_ratio < ratio.0 {
        let w = src_w;
        (w, ((w as f64 / ratio.0).round() as usize).clamp(1, src_h))
    } else if in_ratio > ratio.1 {
        let h = src_h;
        (((h as f64 * ratio.1).round() as usize).clamp(1, src_w), h)
    } else {
        (src_w, src_h)
    };
    ((src_w - w) / 2, (src_h - h) / 2, w, h)
}

/// Random resized crop: sampled rect, bicubically resampled to out x out.
pub fn random_resized_crop(
    img: &Image,
    scale: (f64, f64),
    ratio: (f64, f64),
    out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, CropMeta)> {
    let (x0, y0, w, h) = sample_crop_rect(img.h, img.w, scale, ratio, rng);
    let view = img.resize_crop_bicubic(x0, y0, w, h, out)?;
    Ok((view, CropMeta { x0, y0, w, h, flipped: false }))
}

/// Scale brightness, contrast, and saturation by the given factors (applied
/// in that order), clamping to [0,1] at the end.
pub fn apply_color_factors(img: &Image, brightness: f64, contrast: f64, saturation: f64) -> Image {
    let mut out = img.clone();
    // brightness: plain scaling
    for c in 0..out.c {
        for y in 0..out.h {
            for x in 0..out.w {
                out.set(c, y, x, out.get(c, y, x) * brightness);
            }
        }
    }
    // contrast: blend with the mean gray level
    let gray_mean = {
        let mut acc = 0.0;
        for y in 0..out.h {
            for x in 0..out.w {
                acc += luma(&out, y, x);
            }
        }
        acc / (out.h * out.w) as f64
    };
    for c in 0..out.c {
        for y in 0..out.h {
            for x in 0..out.w {
                let v = out.get(c, y, x);
                out.set(c, y, x, gray_mean + (v - gray_mean) * contrast);
            }
        }
    }
    // saturation: blend with the per-pixel gray
    if out.c == 3 {
        for y in 0..out.h {
            for x in 0..out.w {
                let g = luma(&out, y, x);
                for c in 0..3 {
                    let v = out.get(c, y, x);
                    out.set(c, y, x, g + (v - g) * saturation);
                }
            }
        }
    }
    out.clamp01();
    out
}

fn luma(img: &Image, y: usize, x: usize) -> f64 {
    if img.c == 3 {
        0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x)
    } else {
        img.get(0, y, x)
    }
}

/// Color jitter: draws three factors in fixed order (brightness, contrast,
/// saturation), each U(1-s, 1+s).
pub fn color_jitter(img: &Image, strengths: (f64, f64, f64), rng: &mut ChaCha8Rng) -> Image {
    let b = uniform(rng, 1.0 - strengths.0, 1.0 + strengths.0);
    let c = uniform(rng, 1.0 - strengths.1, 1.0 + strengths.1);
    let s = uniform(rng, 1.0 - strengths.2, 1.0 + strengths.2);
    apply_color_factors(img, b, c, s)
}

/// Pixels at or above the threshold are inverted.
pub fn solarize(img: &Image, threshold: f64) -> Image {
    let mut out = img.clone();
    for c in 0..out.c {
        for y in 0..out.h {
            for x in 0..out.w {
                let v = out.get(c, y, x);
                if v >= threshold {
                    out.set(c, y, x, 1.0 - v);
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Slot {
    Global1,
    Global2,
    Local,
}

fn make_one_view(
    img: &Image,
    cfg: &ViewConfig,
    slot: Slot,
    rng: &mut ChaCha8Rng,
) -> Result<(Image, CropMeta)> {
    let (scale, out_size, blur_p) = match slot {
        Slot::Global1 => ((cfg.scale_split, 1.0), cfg.global_size, cfg.blur_p.0),
        Slot::Global2 => ((cfg.scale_split, 1.0), cfg.global_size, cfg.blur_p.1),
        Slot::Local => ((cfg.local_scale_min, cfg.scale_split), cfg.local_size, cfg.blur_p.2),
    };
    // fixed op order: crop, flip, jitter, blur, solarize
    let (mut view, mut meta) = random_resized_crop(img, scale, cfg.ratio, out_size, rng)?;
    if rng.gen::<f64>() < cfg.flip_p {
        view = view.hflip();
        meta.flipped = true;
    }
    if rng.gen::<f64>() < cfg.jitter_p {
        view = color_jitter(&view, cfg.jitter_strengths, rng);
    }
    if rng.gen::<f64>() < blur_p {
        let sigma = uniform(rng, cfg.blur_sigma.0, cfg.blur_sigma.1);
        view = view.gaussian_blur(sigma)?;
    }
    if matches!(slot, Slot::Global2) && rng.gen::<f64>() < cfg.solarize_p {
        view = solarize(&view, cfg.solarize_threshold);
    }
    Ok((view, meta))
}

/// Build the full view set for one image: global 1, global 2, then locals in
/// order, all draws from the one stream in a fixed sequence.
pub fn make_views(img: &Image, cfg: &ViewConfig, rng: &mut ChaCha8Rng) -> Result<ViewSet> {
    let mut views = Vec::with_capacity(2 + cfg.n_local);
    let mut meta = Vec::with_capacity(2 + cfg.n_local);
    for slot in [Slot::Global1, Slot::Global2] {
        let (v, m) = make_one_view(img, cfg, slot, rng)?;
        views.push(v);
        meta.push(m);
    }
    for _ in 0..cfg.n_local {
        let (v, m) = make_one_view(img, cfg, Slot::Local, rng)?;
        views.push(v);
        meta.push(m);
    }
    Ok(ViewSet { views, meta, n_local: cfg.n_local })
}
