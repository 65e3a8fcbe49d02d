use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::optim::Parameter;
use super::tensor::Tensor;

const MAGIC: &[u8; 5] = b"CKPT1";

/// Serialized model state: parameters with optimiser moments, the epoch
/// reached, and a free-form metadata string (the model configuration).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    pub meta: String,
    pub params: Vec<Parameter<f32>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated checkpoint")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid utf-8 string".to_string())
    }

    fn floats(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("size overflow")?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_floats(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&self.epoch.to_le_bytes());
        put_str(&mut out, &self.meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            let shape = p.value.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&p.step.to_le_bytes());
            put_floats(&mut out, &p.value);
            put_floats(&mut out, &p.m);
            put_floats(&mut out, &p.v);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let epoch = r.u32()?;
        let meta = r.string()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(format!("parameter {name} has {ndim} dimensions"));
            }
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("size overflow")?;
            let step = r.u64()?;
            let mk = |data| Tensor::new(shape.clone(), data).map_err(|e| e.to_string());
            let value = mk(r.floats(len)?)?;
            let m = mk(r.floats(len)?)?;
            let v = mk(r.floats(len)?)?;
            params.push(Parameter { name, value, m, v, step });
        }
        if r.pos != buf.len() {
            return Err("trailing bytes after checkpoint".into());
        }
        Ok(Checkpoint { epoch, meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|msg| Error::format(path, msg))
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<f32>> {
        self.params.iter().find(|p| p.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let mut p = Parameter::new("layer0.w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap());
        p.step = 17;
        p.m.data_mut()[1] = 0.25;
        let ck = Checkpoint { epoch: 4, meta: "depth = 2".into(), params: vec![p, Parameter::new("b", Tensor::zeros(&[3]))] };
        let bytes = ck.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE!").is_err());
    }
}
