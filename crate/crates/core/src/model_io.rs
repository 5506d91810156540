//! Binary model files: a tagged header (format magic, architecture, modality,
//! init seed) followed by both parameter sets. Loading reconstructs the
//! architecture first and then overlays the stored tensors, so any
//! name/shape drift surfaces as a parse error instead of silent corruption.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::DaganError;
use crate::models::{Arch, GanModel, Modality};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DAGANM01";

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn write_param_set(out: &mut Vec<u8>, ps: &ParamSet) {
    out.extend_from_slice(&(ps.len() as u32).to_le_bytes());
    for (name, t) in ps.iter() {
        write_str(out, name);
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn save_model(path: &Path, model: &GanModel) -> Result<(), DaganError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_str(&mut out, model.arch.as_str());
    write_str(&mut out, model.modality.as_str());
    out.extend_from_slice(&model.seed.to_le_bytes());
    write_param_set(&mut out, &model.generator);
    write_param_set(&mut out, &model.discriminator);
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DaganError> {
        if self.pos + n > self.buf.len() {
            return Err(DaganError::Parse(format!("{}: truncated model file", self.path)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DaganError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DaganError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DaganError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, DaganError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| DaganError::Parse(format!("{}: non-utf8 string", self.path)))
    }
}

fn read_into_param_set(r: &mut Reader<'_>, ps: &mut ParamSet, which: &str) -> Result<(), DaganError> {
    let count = r.u32()? as usize;
    if count != ps.len() {
        return Err(DaganError::Parse(format!(
            "{}: {which} has {count} tensors, architecture expects {}",
            r.path,
            ps.len()
        )));
    }
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.f64()?);
        }
        let target = ps.get_mut(&name).ok_or_else(|| {
            DaganError::Parse(format!("{}: unknown {which} parameter '{name}'", r.path))
        })?;
        if target.shape != shape {
            return Err(DaganError::Parse(format!(
                "{}: {which} parameter '{name}' has shape {:?}, expected {:?}",
                r.path, shape, target.shape
            )));
        }
        *target = Tensor::from_vec(&shape, data)?;
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<GanModel, DaganError> {
    let buf = fs::read(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(8)? != MAGIC {
        return Err(DaganError::Parse(format!(
            "{}: not a model file (bad magic)",
            path.display()
        )));
    }
    let arch = Arch::parse(&r.string()?)?;
    let modality = Modality::parse(&r.string()?)?;
    let seed = r.u64()?;
    let mut model = GanModel::new(arch, modality, seed);
    read_into_param_set(&mut r, &mut model.generator, "generator")?;
    read_into_param_set(&mut r, &mut model.discriminator, "discriminator")?;
    if r.pos != buf.len() {
        return Err(DaganError::Parse(format!(
            "{}: trailing bytes after model payload",
            path.display()
        )));
    }
    Ok(model)
}
