//! Hermetic synthetic dataset: procedurally rendered geometric shapes with
//! labels, a small binary container, and deterministic batch iteration.
//!
//! Every sample is a pure function of (spec, stream salt, index), so ground
//! truth — including the shape's pixel mask — can be regenerated on demand
//! without storing it.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{permutation, stream, uniform, DOMAIN_DATA, DOMAIN_SHUFFLE};

pub const DSV_MAGIC: &[u8; 4] = b"DSV1";
pub const DSV_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [Self::Disk, Self::Square, Self::Triangle, Self::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Self::Disk => "disk",
            Self::Square => "square",
            Self::Triangle => "triangle",
            Self::Cross => "cross",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "disk" => Ok(Self::Disk),
            "square" => Ok(Self::Square),
            "triangle" => Ok(Self::Triangle),
            "cross" => Ok(Self::Cross),
            other => Err(Error::Param(format!("unknown shape kind {other:?}"))),
        }
    }

    /// Fixed fill color per class.
    fn color(self) -> [f64; 3] {
        match self {
            Self::Disk => [0.85, 0.25, 0.25],
            Self::Square => [0.25, 0.75, 0.30],
            Self::Triangle => [0.30, 0.40, 0.90],
            Self::Cross => [0.90, 0.80, 0.30],
        }
    }

    /// Point-inclusion test in shape-local coordinates (already centered and
    /// de-rotated), against half-extent r.
    fn contains(self, u: f64, v: f64, r: f64) -> bool {
        match self {
            Self::Disk => u * u + v * v <= r * r,
            Self::Square => u.abs() <= r && v.abs() <= r,
            Self::Triangle => {
                // equilateral, apex up, circumradius r
                let verts = [(0.0, -r), (r * 0.866_025_403_784_438_6, r * 0.5), (-r * 0.866_025_403_784_438_6, r * 0.5)];
                let mut sign = 0.0;
                for i in 0..3 {
                    let (x1, y1) = verts[i];
                    let (x2, y2) = verts[(i + 1) % 3];
                    let cross = (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1);
                    if cross == 0.0 {
                        continue;
                    }
                    if sign == 0.0 {
                        sign = cross.signum();
                    } else if cross.signum() != sign {
                        return false;
                    }
                }
                true
            }
            Self::Cross => {
                let third = r / 3.0;
                (u.abs() <= third && v.abs() <= r) || (v.abs() <= third && u.abs() <= r)
            }
        }
    }
}

/// Generator spec. Jitter fields are half-ranges: zero means every image of a
/// class is pixel-identical (given zero noise).
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub classes: Vec<ShapeKind>,
    pub n_per_class: usize,
    pub side: usize,
    /// Drives both the background texture amplitude and per-pixel noise.
    pub noise: f64,
    /// Center offset, as a fraction of the side, drawn U(-j, j) per axis.
    pub pos_jitter: f64,
    /// Shape half-extent as a fraction of side/2, drawn U(lo, hi).
    pub scale_range: (f64, f64),
    /// Rotation drawn U(-r, r) radians.
    pub rot_jitter: f64,
    /// Blend factor toward a per-sample random fill color: 0 keeps the fixed
    /// class palette, 1 erases color as a class cue entirely.
    pub color_jitter: f64,
    pub seed: u64,
}

impl ToySpec {
    /// The calibration dataset the quantitative checks train on.
    pub fn default_train() -> Self {
        Self {
            classes: ShapeKind::ALL.to_vec(),
            n_per_class: 500,
            side: 32,
            noise: 0.12,
            pos_jitter: 0.22,
            scale_range: (0.45, 0.85),
            rot_jitter: 0.6,
            color_jitter: 0.0,
            seed: 7,
        }
    }

    pub fn default_test() -> Self {
        Self { n_per_class: 200, ..Self::default_train() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.n_per_class == 0 || self.side == 0 {
            return Err(Error::Param("empty dataset spec".into()));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Param(format!("noise level {} outside [0,1)", self.noise)));
        }
        if self.scale_range.0 <= 0.0 || self.scale_range.0 > self.scale_range.1 {
            return Err(Error::Param("bad scale range".into()));
        }
        if !(0.0..=1.0).contains(&self.color_jitter) {
            return Err(Error::Param(format!("color jitter {} outside [0,1]", self.color_jitter)));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.classes.len() * self.n_per_class
    }
}

/// Render sample `index` (classes interleave: label = index mod class count).
/// Returns the image and the shape's boolean coverage mask. Pure in
/// (spec, salt, index); the mask ignores noise by construction.
pub fn render_sample(spec: &ToySpec, salt: u64, index: usize) -> (Image, u16, Vec<bool>) {
    let label = (index % spec.classes.len()) as u16;
    let kind = spec.classes[label as usize];
    let side = spec.side;
    let mut rng = stream(spec.seed, DOMAIN_DATA, salt, index as u64);

    // fixed draw order: texture field, position, scale, rotation, fill color
    // (only when color_jitter > 0, so older specs replay bit-identically),
    // then pixel noise
    let mut field = [[0.0f64; 4]; 4];
    for row in &mut field {
        for v in row.iter_mut() {
            *v = uniform(&mut rng, -1.0, 1.0);
        }
    }
    let half = side as f64 / 2.0;
    let cx = half + uniform(&mut rng, -spec.pos_jitter, spec.pos_jitter) * side as f64;
    let cy = half + uniform(&mut rng, -spec.pos_jitter, spec.pos_jitter) * side as f64;
    let r = half * uniform(&mut rng, spec.scale_range.0, spec.scale_range.1);
    let theta = uniform(&mut rng, -spec.rot_jitter, spec.rot_jitter);
    let (sin_t, cos_t) = (libm::sin(theta), libm::cos(theta));

    const BG: f64 = 0.45;
    let tex_amp = spec.noise * 0.5;
    let mut color = kind.color();
    if spec.color_jitter > 0.0 {
        let cj = spec.color_jitter;
        for ch in &mut color {
            let rnd = uniform(&mut rng, 0.1, 0.9);
            *ch = (1.0 - cj) * *ch + cj * rnd;
        }
    }
    let mut img = Image::zeros(3, side, side);
    let mut mask = vec![false; side * side];
    for y in 0..side {
        for x in 0..side {
            // smooth background: bilinear sample of the 4x4 field
            let fy = y as f64 / side as f64 * 3.0;
            let fx = x as f64 / side as f64 * 3.0;
            let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
            let (dy, dx) = (fy - iy as f64, fx - ix as f64);
            let (iy1, ix1) = ((iy + 1).min(3), (ix + 1).min(3));
            let tex = field[iy][ix] * (1.0 - dy) * (1.0 - dx)
                + field[iy][ix1] * (1.0 - dy) * dx
                + field[iy1][ix] * dy * (1.0 - dx)
                + field[iy1][ix1] * dy * dx;
            let bg = BG + tex_amp * tex;

            // shape coverage by 2x2 supersampling
            let mut inside = 0u32;
            for sy in 0..2 {
                for sx in 0..2 {
                    let py = y as f64 + 0.25 + 0.5 * sy as f64 - cy;
                    let px = x as f64 + 0.25 + 0.5 * sx as f64 - cx;
                    let u = cos_t * px + sin_t * py;
                    let v = -sin_t * px + cos_t * py;
                    if kind.contains(u, v, r) {
                        inside += 1;
                    }
                }
            }
            let alpha = inside as f64 / 4.0;
            mask[y * side + x] = inside >= 2;
            for c in 0..3 {
                img.set(c, y, x, bg * (1.0 - alpha) + color[c] * alpha);
            }
        }
    }
    // per-pixel additive noise, drawn in raster-major (c, y, x) order
    if spec.noise > 0.0 {
        let amp = spec.noise * 0.25;
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let n = uniform(&mut rng, -amp, amp);
                    img.set(c, y, x, img.get(c, y, x) + n);
                }
            }
        }
    }
    img.clamp01();
    (img, label, mask)
}

/// Labeled image collection; pixels stored quantized (u8), the canonical form
/// that serialization round-trips bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
    pub class_names: Vec<String>,
    /// Not serialized; set by the generator or from the file stem on load.
    pub split: String,
}

impl Dataset {
    pub fn image(&self, i: usize) -> Image {
        let sz = self.c * self.h * self.w;
        Image::from_u8(self.c, self.h, self.w, &self.pixels[i * sz..(i + 1) * sz])
            .expect("stored geometry is consistent")
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.pixels.len() + 64);
        buf.extend_from_slice(DSV_MAGIC);
        for v in [DSV_VERSION, self.n as u32, self.c as u32, self.h as u32, self.w as u32, self.class_names.len() as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for name in &self.class_names {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
        }
        buf.extend_from_slice(&self.pixels);
        for &l in &self.labels {
            buf.extend_from_slice(&l.to_le_bytes());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = fs::read(path)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != DSV_MAGIC {
            return Err(Error::Format { what: "dsv", offset: 0, msg: "bad magic".into() });
        }
        let version = r.u32("version")?;
        if version != DSV_VERSION {
            return Err(Error::Format {
                what: "dsv",
                offset: 4,
                msg: format!("unsupported version {version}"),
            });
        }
        let n = r.u32("sample count")? as usize;
        let c = r.u32("channels")? as usize;
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let n_classes = r.u32("class count")? as usize;
        if n_classes > 65_536 {
            return Err(Error::Format {
                what: "dsv",
                offset: r.pos as u64 - 4,
                msg: format!("implausible class count {n_classes}"),
            });
        }
        let mut class_names = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let len = r.u32("class name length")? as usize;
            let off = r.pos as u64;
            let raw = r.take(len, "class name")?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| Error::Format { what: "dsv", offset: off, msg: "class name not UTF-8".into() })?;
            class_names.push(name.to_string());
        }
        let pixel_len = n
            .checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Format { what: "dsv", offset: 8, msg: "geometry overflows".into() })?;
        let pixels = r.take(pixel_len, "pixel payload")?.to_vec();
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let off = r.pos as u64;
            let raw = r.take(2, "label")?;
            let l = u16::from_le_bytes([raw[0], raw[1]]);
            if (l as usize) >= n_classes {
                return Err(Error::Format {
                    what: "dsv",
                    offset: off,
                    msg: format!("label {l} out of range for {n_classes} classes"),
                });
            }
            labels.push(l);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                what: "dsv",
                offset: r.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let split = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Dataset { n, c, h, w, pixels, labels, class_names, split })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::Format {
                what: "dsv",
                offset: self.pos as u64,
                msg: format!(
                    "truncated reading {what}: want {len} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let raw = self.take(4, what)?;
        Ok(u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]))
    }
}

/// Generate the dataset for `spec`. `salt` separates splits drawn from the
/// same seed (0 = train, 1 = test by convention).
pub fn gen_toy(spec: &ToySpec, salt: u64, split: &str) -> Result<Dataset> {
    spec.validate()?;
    let total = spec.total();
    let mut pixels = Vec::with_capacity(total * 3 * spec.side * spec.side);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let (img, label, _) = render_sample(spec, salt, i);
        pixels.extend_from_slice(&img.to_u8());
        labels.push(label);
    }
    Ok(Dataset {
        n: total,
        c: 3,
        h: spec.side,
        w: spec.side,
        pixels,
        labels,
        class_names: spec.classes.iter().map(|k| k.name().to_string()).collect(),
        split: split.to_string(),
    })
}

/// A generation request covering both splits: the train spec plus the test
/// split's per-class count. Train renders with salt 0, test with salt 1, so
/// the splits never share images even under the same seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub train: ToySpec,
    pub n_test_per_class: usize,
}

impl GenSpec {
    pub const KNOWN_KEYS: [&'static str; 11] = [
        "gen.seed",
        "gen.classes",
        "gen.n_train_per_class",
        "gen.n_test_per_class",
        "gen.side",
        "gen.noise",
        "gen.pos_jitter",
        "gen.scale_min",
        "gen.scale_max",
        "gen.rot_jitter",
        "gen.color_jitter",
    ];

    /// Parse a key=value generation spec; every key is optional and defaults
    /// to the standard train/test sets.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = crate::config::KvConfig::parse(text)?;
        kv.reject_unknown(&Self::KNOWN_KEYS)?;
        let d = ToySpec::default_train();
        let classes = match kv.get("gen.classes") {
            None => d.classes.clone(),
            Some(list) => list
                .split(',')
                .map(|s| ShapeKind::parse(s.trim()))
                .collect::<Result<Vec<_>>>()?,
        };
        let train = ToySpec {
            classes,
            n_per_class: kv.get_usize("gen.n_train_per_class", d.n_per_class)?,
            side: kv.get_usize("gen.side", d.side)?,
            noise: kv.get_f64("gen.noise", d.noise)?,
            pos_jitter: kv.get_f64("gen.pos_jitter", d.pos_jitter)?,
            scale_range: (
                kv.get_f64("gen.scale_min", d.scale_range.0)?,
                kv.get_f64("gen.scale_max", d.scale_range.1)?,
            ),
            rot_jitter: kv.get_f64("gen.rot_jitter", d.rot_jitter)?,
            color_jitter: kv.get_f64("gen.color_jitter", d.color_jitter)?,
            seed: kv.get_u64("gen.seed", d.seed)?,
        };
        let n_test =
            kv.get_usize("gen.n_test_per_class", ToySpec::default_test().n_per_class)?;
        let spec = GenSpec { train, n_test_per_class: n_test };
        spec.train.validate()?;
        Ok(spec)
    }

    pub fn test_spec(&self) -> ToySpec {
        ToySpec { n_per_class: self.n_test_per_class, ..self.train.clone() }
    }
}

/// Deterministic shuffled batches: the permutation is a pure function of
/// (seed, epoch). The final partial batch is kept.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Param("batch size must be at least 1".into()));
    }
    let mut rng = stream(seed, DOMAIN_SHUFFLE, epoch, 0);
    let perm = permutation(n, &mut rng);
    Ok(perm.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ToySpec {
        ToySpec { n_per_class: 6, side: 16, ..ToySpec::default_train() }
    }

    #[test]
    fn gen_spec_parses_defaults_and_overrides() {
        let d = GenSpec::from_text("").unwrap();
        assert_eq!(d.train, ToySpec::default_train());
        assert_eq!(d.n_test_per_class, ToySpec::default_test().n_per_class);
        assert_eq!(d.test_spec().n_per_class, d.n_test_per_class);

        let s = GenSpec::from_text(
            "gen.seed=3\ngen.classes=disk, cross\ngen.n_train_per_class=10\n\
             gen.n_test_per_class=4\ngen.side=16\ngen.noise=0.05\n",
        )
        .unwrap();
        assert_eq!(s.train.seed, 3);
        assert_eq!(s.train.classes, vec![ShapeKind::Disk, ShapeKind::Cross]);
        assert_eq!(s.train.n_per_class, 10);
        assert_eq!(s.n_test_per_class, 4);
        assert_eq!(s.train.side, 16);
        assert_eq!(s.train.noise, 0.05);

        assert!(matches!(
            GenSpec::from_text("gen.classes=pentagon"),
            Err(Error::Param(_))
        ));
        assert!(matches!(
            GenSpec::from_text("gen.what=1"),
            Err(Error::Config { line: 1, .. })
        ));
    }

    #[test]
    fn color_jitter_varies_fill_but_not_geometry() {
        let base = tiny_spec();
        let jittered = ToySpec { color_jitter: 1.0, ..base.clone() };
        // masks come from geometry draws that precede the color draw, so they
        // are identical; the painted pixels are not
        let mut any_pixel_diff = false;
        for i in 0..8 {
            let (img_a, la, mask_a) = render_sample(&base, 0, i);
            let (img_b, lb, mask_b) = render_sample(&jittered, 0, i);
            assert_eq!(la, lb);
            assert_eq!(mask_a, mask_b);
            'px: for c in 0..3 {
                for y in 0..base.side {
                    for x in 0..base.side {
                        if img_a.get(c, y, x) != img_b.get(c, y, x) {
                            any_pixel_diff = true;
                            break 'px;
                        }
                    }
                }
            }
        }
        assert!(any_pixel_diff);
        // full jitter decouples fill from class: two same-class samples get
        // different colors (distinct draws from the per-index streams)
        let (a, _, ma) = render_sample(&jittered, 0, 0);
        let (b, _, mb) = render_sample(&jittered, 0, 4);
        let mean_fill = |img: &Image, m: &[bool]| -> [f64; 3] {
            let side = jittered.side;
            let mut s = [0.0; 3];
            let mut n = 0.0;
            for y in 0..side {
                for x in 0..side {
                    if m[y * side + x] {
                        for (c, acc) in s.iter_mut().enumerate() {
                            *acc += img.get(c, y, x);
                        }
                        n += 1.0;
                    }
                }
            }
            s.map(|v| v / n)
        };
        let fa = mean_fill(&a, &ma);
        let fb = mean_fill(&b, &mb);
        let dist: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).sum();
        assert!(dist > 0.05, "same-class fills too similar: {fa:?} vs {fb:?}");
        assert!(ToySpec { color_jitter: 1.5, ..base }.validate().is_err());
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let spec = tiny_spec();
        let a = gen_toy(&spec, 0, "train").unwrap();
        let b = gen_toy(&spec, 0, "train").unwrap();
        assert_eq!(a.pixels, b.pixels);
        assert_eq!(a.labels, b.labels);
        // a different salt yields different images
        let c = gen_toy(&spec, 1, "test").unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn zero_noise_zero_jitter_collapses_each_class_to_one_image() {
        let spec = ToySpec {
            noise: 0.0,
            pos_jitter: 0.0,
            scale_range: (0.7, 0.7),
            rot_jitter: 0.0,
            n_per_class: 4,
            side: 16,
            ..tiny_spec()
        };
        let ds = gen_toy(&spec, 0, "train").unwrap();
        let sz = ds.c * ds.h * ds.w;
        let k = ds.class_names.len();
        for i in 0..ds.n {
            let same_class = i % k; // first occurrence of this class
            let a = &ds.pixels[i * sz..(i + 1) * sz];
            let b = &ds.pixels[same_class * sz..(same_class + 1) * sz];
            assert_eq!(a, b, "sample {i} deviates from its class prototype");
        }
        // and a pixel-space 1-NN across splits is trivially perfect
        let test = gen_toy(&ToySpec { n_per_class: 2, ..spec.clone() }, 1, "test").unwrap();
        for i in 0..test.n {
            let q = &test.pixels[i * sz..(i + 1) * sz];
            let mut best = (f64::INFINITY, 0u16);
            for j in 0..ds.n {
                let t = &ds.pixels[j * sz..(j + 1) * sz];
                let d: f64 = q
                    .iter()
                    .zip(t.iter())
                    .map(|(&a, &b)| {
                        let diff = a as f64 - b as f64;
                        diff * diff
                    })
                    .sum();
                if d < best.0 {
                    best = (d, ds.labels[j]);
                }
            }
            assert_eq!(best.1, test.labels[i]);
        }
    }

    #[test]
    fn jitter_spreads_images_within_a_class() {
        let spec = tiny_spec();
        let ds = gen_toy(&spec, 0, "train").unwrap();
        let sz = ds.c * ds.h * ds.w;
        let k = ds.class_names.len();
        // two samples of class 0
        let a = &ds.pixels[0..sz];
        let b = &ds.pixels[k * sz..(k + 1) * sz];
        assert_ne!(a, b);
    }

    #[test]
    fn masks_are_nonempty_and_match_labels() {
        let spec = tiny_spec();
        for i in 0..spec.total() {
            let (img, label, mask) = render_sample(&spec, 0, i);
            assert_eq!(label as usize, i % spec.classes.len());
            let area: usize = mask.iter().filter(|&&m| m).count();
            assert!(area > 4, "sample {i}: mask nearly empty");
            assert!(area < spec.side * spec.side, "sample {i}: mask covers everything");
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn dsv_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.dsv");
        let ds = gen_toy(&tiny_spec(), 0, "train").unwrap();
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.pixels, ds.pixels);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.class_names, ds.class_names);
        assert_eq!(back.split, "train");
        // byte-level: saving the loaded dataset reproduces the file
        let path2 = dir.path().join("again.dsv");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_containers_are_rejected_with_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dsv");
        let ds = gen_toy(&tiny_spec(), 0, "x").unwrap();
        ds.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        // bad magic
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format { .. })));

        // truncated pixel payload
        let short = &good[..good.len() - ds.n * 2 - 10];
        std::fs::write(&path, short).unwrap();
        match Dataset::load(&path) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }

        // header sample count inconsistent with payload
        let mut lying = good.clone();
        let n_plus = (ds.n as u32 + 1).to_le_bytes();
        lying[8..12].copy_from_slice(&n_plus);
        std::fs::write(&path, &lying).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format { .. })));

        // trailing garbage
        let mut fat = good.clone();
        fat.extend_from_slice(b"zz");
        std::fs::write(&path, &fat).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn batches_partition_the_dataset() {
        let batches = epoch_batches(23, 5, 7, 0).unwrap();
        assert_eq!(batches.len(), 5);
        assert_eq!(batches.last().unwrap().len(), 3);
        let mut seen = vec![false; 23];
        for b in &batches {
            for &i in b {
                assert!(!seen[i], "index {i} repeated");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn batch_order_depends_on_epoch_but_not_on_the_run() {
        let a = epoch_batches(50, 8, 3, 0).unwrap();
        let b = epoch_batches(50, 8, 3, 0).unwrap();
        assert_eq!(a, b);
        let c = epoch_batches(50, 8, 3, 1).unwrap();
        assert_ne!(a, c);
    }
}
