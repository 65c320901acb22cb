//! Checkpoint container: magic "DCK1", a config-text snapshot, then named
//! arrays (student/teacher parameters, the center, optimizer moments, and
//! step counters), all little-endian. Reloading reproduces training
//! bit-exactly — no RNG state is stored because every random stream is
//! re-derived from (seed, purpose, step) on demand.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const DCK_MAGIC: &[u8; 4] = b"DCK1";
pub const DCK_VERSION: u32 = 1;

/// A full training snapshot in parameter dtype `T` (the center is always
/// f64). Moments are in student parameter order.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config_text: String,
    pub step: u64,
    pub epoch: u64,
    pub opt_steps: u64,
    pub student: ParamSet<T>,
    pub teacher: ParamSet<T>,
    pub center: Tensor<f64>,
    pub opt_m: Vec<Tensor<T>>,
    pub opt_v: Vec<Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn validate(&self) -> Result<()> {
        if !self.student.same_structure(&self.teacher) {
            return Err(Error::Contract("student/teacher structures differ".into()));
        }
        if self.opt_m.len() != self.student.len() || self.opt_v.len() != self.student.len() {
            return Err(Error::Contract(format!(
                "moment counts {}/{} vs {} parameters",
                self.opt_m.len(),
                self.opt_v.len(),
                self.student.len()
            )));
        }
        for (k, (name, p)) in self.student.iter().enumerate() {
            if self.opt_m[k].shape() != p.shape() || self.opt_v[k].shape() != p.shape() {
                return Err(Error::Contract(format!("moment shape mismatch at {name:?}")));
            }
        }
        Ok(())
    }
}

fn put_bytes<T: Scalar>(buf: &mut Vec<u8>, t: &Tensor<T>) {
    match T::DTYPE {
        Dtype::F32 => {
            for &v in t.data() {
                buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                buf.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
        other => unreachable!("parameters are float tensors, not {other:?}"),
    }
}

fn put_array<T: Scalar>(buf: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(T::DTYPE as u8);
    buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    put_bytes(buf, t);
}

fn put_u64_array(buf: &mut Vec<u8>, name: &str, v: u64) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(Dtype::U64 as u8);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serialize and write via a temp file + rename, so readers never observe a
/// half-written checkpoint.
pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    ckpt.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(DCK_MAGIC);
    buf.extend_from_slice(&DCK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ckpt.config_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(ckpt.config_text.as_bytes());
    let n_arrays = 2 * ckpt.student.len() + ckpt.opt_m.len() + ckpt.opt_v.len() + 4;
    buf.extend_from_slice(&(n_arrays as u32).to_le_bytes());
    for (name, t) in ckpt.student.iter() {
        put_array(&mut buf, &format!("student.{name}"), t);
    }
    for (name, t) in ckpt.teacher.iter() {
        put_array(&mut buf, &format!("teacher.{name}"), t);
    }
    put_array(&mut buf, "center", &ckpt.center);
    for (k, (name, _)) in ckpt.student.iter().enumerate() {
        put_array(&mut buf, &format!("opt.m.{name}"), &ckpt.opt_m[k]);
    }
    for (k, (name, _)) in ckpt.student.iter().enumerate() {
        put_array(&mut buf, &format!("opt.v.{name}"), &ckpt.opt_v[k]);
    }
    put_u64_array(&mut buf, "meta.step", ckpt.step);
    put_u64_array(&mut buf, "meta.epoch", ckpt.epoch);
    put_u64_array(&mut buf, "meta.opt_steps", ckpt.opt_steps);

    let tmp = path.with_extension("dck.tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos.checked_add(len).is_none_or(|end| end > self.bytes.len()) {
            return Err(Error::Format {
                what: "dck",
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

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

enum Array<T> {
    Float(Tensor<T>),
    F64(Tensor<f64>),
    U64(Vec<u64>),
}

fn read_array<T: Scalar>(r: &mut Reader) -> Result<(String, Array<T>)> {
    let name_len = r.u32("array name length")? as usize;
    if name_len > 4096 {
        return Err(Error::Format {
            what: "dck",
            offset: r.pos as u64 - 4,
            msg: format!("implausible name length {name_len}"),
        });
    }
    let name_off = r.pos as u64;
    let name = std::str::from_utf8(r.take(name_len, "array name")?)
        .map_err(|_| Error::Format { what: "dck", offset: name_off, msg: "name not UTF-8".into() })?
        .to_string();
    let tag_off = r.pos as u64;
    let tag = r.u8("dtype tag")?;
    let dtype = Dtype::from_tag(tag).ok_or_else(|| Error::Format {
        what: "dck",
        offset: tag_off,
        msg: format!("unknown dtype tag {tag}"),
    })?;
    let rank = r.u32("rank")? as usize;
    if rank > 8 {
        return Err(Error::Format {
            what: "dck",
            offset: r.pos as u64 - 4,
            msg: format!("implausible rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for _ in 0..rank {
        let d = r.u32("dimension")? as usize;
        numel = numel.checked_mul(d).ok_or_else(|| Error::Format {
            what: "dck",
            offset: r.pos as u64,
            msg: "shape overflows".into(),
        })?;
        shape.push(d);
    }
    let arr = match dtype {
        d if d == T::DTYPE => {
            let width = match d {
                Dtype::F32 => 4,
                Dtype::F64 => 8,
                _ => {
                    return Err(Error::Format {
                        what: "dck",
                        offset: tag_off,
                        msg: format!("{name:?}: non-float parameter dtype"),
                    })
                }
            };
            let raw = r.take(numel * width, "array data")?;
            let data: Vec<T> = match d {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                    .collect(),
                _ => raw
                    .chunks_exact(8)
                    .map(|c| {
                        T::from_f64(f64::from_le_bytes([
                            c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                        ]))
                    })
                    .collect(),
            };
            Array::Float(Tensor::from_vec(shape, data)?)
        }
        Dtype::F64 => {
            let raw = r.take(numel * 8, "array data")?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            Array::F64(Tensor::from_vec(shape, data)?)
        }
        Dtype::U64 => {
            let raw = r.take(numel * 8, "array data")?;
            let data: Vec<u64> = raw
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            Array::U64(data)
        }
        other => {
            return Err(Error::Format {
                what: "dck",
                offset: tag_off,
                msg: format!("{name:?}: dtype {other:?} does not match this run"),
            })
        }
    };
    Ok((name, arr))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4, "magic")? != DCK_MAGIC {
        return Err(Error::Format { what: "dck", offset: 0, msg: "bad magic".into() });
    }
    let version = r.u32("version")?;
    if version != DCK_VERSION {
        return Err(Error::Format {
            what: "dck",
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_off = r.pos as u64;
    let config_text = std::str::from_utf8(r.take(cfg_len, "config text")?)
        .map_err(|_| Error::Format { what: "dck", offset: cfg_off, msg: "config not UTF-8".into() })?
        .to_string();
    let n_arrays = r.u32("array count")? as usize;

    let mut student = ParamSet::<T>::new();
    let mut teacher = ParamSet::<T>::new();
    let mut center: Option<Tensor<f64>> = None;
    let mut m_named: Vec<(String, Tensor<T>)> = Vec::new();
    let mut v_named: Vec<(String, Tensor<T>)> = Vec::new();
    let (mut step, mut epoch, mut opt_steps) = (None, None, None);
    for _ in 0..n_arrays {
        let at = r.pos as u64;
        let (name, arr) = read_array::<T>(&mut r)?;
        let bad = |msg: String| Error::Format { what: "dck", offset: at, msg };
        if let Some(rest) = name.strip_prefix("student.") {
            match arr {
                Array::Float(t) => student.insert(rest, t)?,
                _ => return Err(bad(format!("{name:?} has the wrong dtype"))),
            }
        } else if let Some(rest) = name.strip_prefix("teacher.") {
            match arr {
                Array::Float(t) => teacher.insert(rest, t)?,
                _ => return Err(bad(format!("{name:?} has the wrong dtype"))),
            }
        } else if name == "center" {
            match arr {
                Array::F64(t) => center = Some(t),
                _ => return Err(bad("center must be f64".into())),
            }
        } else if let Some(rest) = name.strip_prefix("opt.m.") {
            match arr {
                Array::Float(t) => m_named.push((rest.to_string(), t)),
                _ => return Err(bad(format!("{name:?} has the wrong dtype"))),
            }
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            match arr {
                Array::Float(t) => v_named.push((rest.to_string(), t)),
                _ => return Err(bad(format!("{name:?} has the wrong dtype"))),
            }
        } else if let Some(slot) = match name.as_str() {
            "meta.step" => Some(&mut step),
            "meta.epoch" => Some(&mut epoch),
            "meta.opt_steps" => Some(&mut opt_steps),
            _ => None,
        } {
            match arr {
                Array::U64(vals) if vals.len() == 1 => *slot = Some(vals[0]),
                _ => return Err(bad(format!("{name:?} must be a single u64"))),
            }
        } else {
            return Err(bad(format!("unexpected array {name:?}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            what: "dck",
            offset: r.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let center = center
        .ok_or_else(|| Error::Format { what: "dck", offset: 0, msg: "missing center".into() })?;
    let missing =
        |what: &str| Error::Format { what: "dck", offset: 0, msg: format!("missing {what}") };
    let step = step.ok_or_else(|| missing("meta.step"))?;
    let epoch = epoch.ok_or_else(|| missing("meta.epoch"))?;
    let opt_steps = opt_steps.ok_or_else(|| missing("meta.opt_steps"))?;

    // moments align to student parameter order by name
    let mut opt_m = Vec::with_capacity(student.len());
    let mut opt_v = Vec::with_capacity(student.len());
    for (name, _) in student.iter() {
        let m = m_named
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| missing(&format!("opt.m.{name}")))?;
        let v = v_named
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| missing(&format!("opt.v.{name}")))?;
        opt_m.push(m.1.clone());
        opt_v.push(v.1.clone());
    }
    let ckpt = Checkpoint {
        config_text,
        step,
        epoch,
        opt_steps,
        student,
        teacher,
        center,
        opt_m,
        opt_v,
    };
    ckpt.validate()?;
    Ok(ckpt)
}
