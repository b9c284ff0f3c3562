//! Binary weight checkpoints. Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "CDNB"
//! version u16      currently 1
//! variant u8       0 cama, 1 caam, 2 causaladv, 3 dice
//! classes u32
//! c,h,w   3 x u32  input shape
//! count   u32      number of named tensors
//! record  count times:
//!   name_len u16, name utf-8, rank u8, dims rank x u32, data numel x f64
//! ```
//!
//! The context buffer of the masking variant rides along as tensors named
//! `buffer.0`, `buffer.1`, ... in FIFO order. Files are written to a
//! temporary sibling and renamed into place, so readers never observe a
//! half-written checkpoint.

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, ModelResult, Variant, ZooModel};
use crate::autograd::Tensor;

const MAGIC: [u8; 4] = *b"CDNB";
const VERSION: u16 = 1;

pub fn save(model: &ZooModel, path: &Path) -> ModelResult<()> {
    let params = model.params();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(model.variant().tag());
    buf.extend_from_slice(&(model.classes() as u32).to_le_bytes());
    for d in model.in_shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in &params {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let tmp = path.with_extension("ckpt.tmp");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&buf)?;
    f.sync_all()?;
    drop(f);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> ModelResult<&'a [u8]> {
        if self.offset + n > self.data.len() {
            return Err(ModelError::Truncated { offset: self.data.len() });
        }
        let s = &self.data[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u8(&mut self) -> ModelResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> ModelResult<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> ModelResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load(path: &Path, cfg: &ModelConfig) -> ModelResult<ZooModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { data: &bytes, offset: 0 };

    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let variant = Variant::from_tag(r.u8()?)?;
    let classes = r.u32()? as usize;
    let in_shape = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let count = r.u32()? as usize;

    let mut model = ZooModel::new(variant, cfg, in_shape, classes, 0)?;
    let mut expected: Vec<String> = model
        .params()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();

    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::Truncated { offset: r.offset })?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::from_vec(shape, data)?;
        model.set_param(&name, tensor)?;
        expected.retain(|n| n != &name);
    }
    if let Some(missing) = expected.first() {
        return Err(ModelError::MissingParam(missing.clone()));
    }
    Ok(model)
}
