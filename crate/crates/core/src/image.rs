//! Pixel-space images: the augmentation pipeline's working type.
//!
//! Pixels are f64 in [0,1], channel-major (c, y, x) — the same layout the
//! backbone's patch extractor expects. Geometry ops (crop-resize, blur, flip)
//! live here; the random draws that drive them live in the views module.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::Param(format!(
                "image {c}x{h}x{w} wants {} values, got {}",
                c * h * w,
                data.len()
            )));
        }
        Ok(Self { c, h, w, data })
    }

    /// 8-bit quantized pixels (the dataset's canonical storage), mapped back
    /// to v/255.
    pub fn from_u8(c: usize, h: usize, w: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != c * h * w {
            return Err(Error::Param(format!(
                "image {c}x{h}x{w} wants {} bytes, got {}",
                c * h * w,
                bytes.len()
            )));
        }
        Ok(Self { c, h, w, data: bytes.iter().map(|&b| b as f64 / 255.0).collect() })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.h * self.w + y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[c * self.h * self.w + y * self.w + x] = v;
    }

    /// Edge-clamped sample.
    #[inline]
    fn get_clamped(&self, c: usize, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.get(c, y, x)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data: Vec<T> = self.data.iter().map(|&v| T::from_f64(v)).collect();
        Tensor::from_vec(vec![self.c, self.h, self.w], data).expect("consistent by construction")
    }

    /// Quantize to bytes with round(p*255), clamped to [0,1] first.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn hflip(&self) -> Image {
        let mut out = Image::zeros(self.c, self.h, self.w);
        for c in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.set(c, y, x, self.get(c, y, self.w - 1 - x));
                }
            }
        }
        out
    }

    /// Resample the rectangle (x0, y0, cw, ch) to out x out using Catmull-Rom
    /// bicubic filtering with half-pixel-center mapping and edge clamping.
    pub fn resize_crop_bicubic(&self, x0: usize, y0: usize, cw: usize, ch: usize, out: usize) -> Result<Image> {
        if cw == 0 || ch == 0 || out == 0 {
            return Err(Error::Param("empty crop or output".into()));
        }
        if x0 + cw > self.w || y0 + ch > self.h {
            return Err(Error::Param(format!(
                "crop {x0},{y0} {cw}x{ch} escapes image {}x{}",
                self.w, self.h
            )));
        }
        let mut dst = Image::zeros(self.c, out, out);
        let sy_scale = ch as f64 / out as f64;
        let sx_scale = cw as f64 / out as f64;
        for oy in 0..out {
            let sy = y0 as f64 + (oy as f64 + 0.5) * sy_scale - 0.5;
            let iy = sy.floor() as isize;
            let wy: Vec<f64> = (-1..=2).map(|j| cubic(sy - (iy + j) as f64)).collect();
            for ox in 0..out {
                let sx = x0 as f64 + (ox as f64 + 0.5) * sx_scale - 0.5;
                let ix = sx.floor() as isize;
                let wx: Vec<f64> = (-1..=2).map(|j| cubic(sx - (ix + j) as f64)).collect();
                for c in 0..self.c {
                    let mut acc = 0.0;
                    for (jy, &fy) in wy.iter().enumerate() {
                        if fy == 0.0 {
                            continue;
                        }
                        let yy = iy + jy as isize - 1;
                        for (jx, &fx) in wx.iter().enumerate() {
                            if fx == 0.0 {
                                continue;
                            }
                            acc += fy * fx * self.get_clamped(c, yy, ix + jx as isize - 1);
                        }
                    }
                    dst.set(c, oy, ox, acc);
                }
            }
        }
        // cubic lobes can overshoot; keep the pixel contract
        dst.clamp01();
        Ok(dst)
    }

    /// Separable Gaussian blur, kernel truncated at radius ceil(2*sigma),
    /// edge-clamped, normalized by the kernel sum.
    pub fn gaussian_blur(&self, sigma: f64) -> Result<Image> {
        if sigma <= 0.0 {
            return Err(Error::Param(format!("blur sigma must be positive, got {sigma}")));
        }
        let radius = (2.0 * sigma).ceil() as isize;
        let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
        let mut ksum = 0.0;
        for j in -radius..=radius {
            let v = libm::exp(-(j as f64 * j as f64) / (2.0 * sigma * sigma));
            kernel.push(v);
            ksum += v;
        }
        let mut mid = Image::zeros(self.c, self.h, self.w);
        for c in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        acc += kv * self.get_clamped(c, y as isize, x as isize + k as isize - radius);
                    }
                    mid.set(c, y, x, acc / ksum);
                }
            }
        }
        let mut out = Image::zeros(self.c, self.h, self.w);
        for c in 0..self.c {
            for y in 0..self.h {
                for x in 0..self.w {
                    let mut acc = 0.0;
                    for (k, &kv) in kernel.iter().enumerate() {
                        acc += kv * mid.get_clamped(c, y as isize + k as isize - radius, x as isize);
                    }
                    out.set(c, y, x, acc / ksum);
                }
            }
        }
        Ok(out)
    }

    /// Binary PPM (P6, maxval 255). Requires 3 channels.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        if self.c != 3 {
            return Err(Error::Param(format!("PPM wants 3 channels, image has {}", self.c)));
        }
        let mut buf = Vec::with_capacity(self.w * self.h * 3 + 32);
        write!(buf, "P6\n{} {}\n255\n", self.w, self.h)?;
        for y in 0..self.h {
            for x in 0..self.w {
                for c in 0..3 {
                    buf.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path)?;
        let mut pos = 0usize;
        let magic = take_token(&bytes, &mut pos)
            .ok_or_else(|| Error::Format { what: "ppm", offset: 0, msg: "missing magic".into() })?;
        if magic != b"P6" {
            return Err(Error::Format { what: "ppm", offset: 0, msg: "not a P6 file".into() });
        }
        let mut dims = [0usize; 3];
        for d in &mut dims {
            let off = pos as u64;
            let tok = take_token(&bytes, &mut pos).ok_or_else(|| Error::Format {
                what: "ppm",
                offset: off,
                msg: "truncated header".into(),
            })?;
            *d = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format { what: "ppm", offset: off, msg: "bad header number".into() })?;
        }
        let (w, h, maxval) = (dims[0], dims[1], dims[2]);
        if maxval != 255 {
            return Err(Error::Format {
                what: "ppm",
                offset: pos as u64,
                msg: format!("unsupported maxval {maxval}"),
            });
        }
        // exactly one whitespace byte separates header and payload
        let payload = &bytes[pos..];
        if payload.len() < w * h * 3 {
            return Err(Error::Format {
                what: "ppm",
                offset: pos as u64,
                msg: format!("payload holds {} bytes, geometry wants {}", payload.len(), w * h * 3),
            });
        }
        let mut img = Image::zeros(3, h, w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    img.set(c, y, x, payload[(y * w + x) * 3 + c] as f64 / 255.0);
                }
            }
        }
        Ok(img)
    }
}

/// Skip whitespace and '#' comments, then return the next token. Advances
/// `pos` one byte past the token (the single binary-separator byte).
fn take_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let tok = &bytes[start..*pos];
    if *pos < bytes.len() {
        *pos += 1; // consume the single separator
    }
    Some(tok)
}

/// Catmull-Rom cubic kernel (a = -0.5), shared with the positional-embedding
/// resampler.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        A * (((x - 5.0) * x + 8.0) * x - 4.0)
    } else {
        0.0
    }
}

/// Binary PGM (P5, maxval 255), row-major.
pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != w * h {
        return Err(Error::Param(format!("PGM {w}x{h} wants {} bytes, got {}", w * h, pixels.len())));
    }
    let mut buf = Vec::with_capacity(w * h + 32);
    write!(buf, "P5\n{w} {h}\n255\n")?;
    buf.extend_from_slice(pixels);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let magic = take_token(&bytes, &mut pos)
        .ok_or_else(|| Error::Format { what: "pgm", offset: 0, msg: "missing magic".into() })?;
    if magic != b"P5" {
        return Err(Error::Format { what: "pgm", offset: 0, msg: "not a P5 file".into() });
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let off = pos as u64;
        let tok = take_token(&bytes, &mut pos).ok_or_else(|| Error::Format {
            what: "pgm",
            offset: off,
            msg: "truncated header".into(),
        })?;
        *d = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format { what: "pgm", offset: off, msg: "bad header number".into() })?;
    }
    let (w, h, maxval) = (dims[0], dims[1], dims[2]);
    if maxval != 255 {
        return Err(Error::Format { what: "pgm", offset: pos as u64, msg: format!("unsupported maxval {maxval}") });
    }
    let payload = &bytes[pos..];
    if payload.len() < w * h {
        return Err(Error::Format {
            what: "pgm",
            offset: pos as u64,
            msg: format!("payload holds {} bytes, geometry wants {}", payload.len(), w * h),
        });
    }
    Ok((w, h, payload[..w * h].to_vec()))
}
