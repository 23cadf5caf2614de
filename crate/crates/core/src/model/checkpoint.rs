//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes   "ADVCLRCK"
//! version      u32       format version (currently 1)
//! header_len   u32       length of the JSON header in bytes
//! header       UTF-8 JSON {format_version, spec, num_classes, projection_dim,
//!                          seed, dtype, metadata}
//! count        u32       number of arrays
//! per array:
//!   name_len   u16, name UTF-8
//!   scope      u8        0 encoder, 1 projection, 2 classifier
//!   flags      u8        bit 0 frozen, bit 1 buffer (running statistic)
//!   ndim       u8, dims  u32 × ndim
//!   data       f32 × product(dims)
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderSpec, ModelParams, ParamEntry, Scope};
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADVCLRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: EncoderSpec,
    num_classes: usize,
    projection_dim: usize,
    seed: u64,
    dtype: DType,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// Parameters plus free-form string metadata (training stage, epoch, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub metadata: BTreeMap<String, String>,
}

fn scope_code(s: Scope) -> u8 {
    match s {
        Scope::Encoder => 0,
        Scope::Projection => 1,
        Scope::Classifier => 2,
    }
}

fn scope_from(code: u8) -> Result<Scope> {
    Ok(match code {
        0 => Scope::Encoder,
        1 => Scope::Projection,
        2 => Scope::Classifier,
        _ => return Err(Error::Checkpoint(format!("unknown scope code {code}"))),
    })
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let p = &ckpt.params;
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        spec: p.spec.clone(),
        num_classes: p.num_classes,
        projection_dim: p.projection_dim,
        seed: p.seed,
        dtype: DType::Float32,
        metadata: ckpt.metadata.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(p.entries().len() as u32).to_le_bytes());
    for e in p.entries() {
        let name = e.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(scope_code(e.scope));
        out.push(u8::from(e.frozen) | (u8::from(e.buffer) << 1));
        out.push(e.value.ndim() as u8);
        for &d in e.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "unexpected end of file at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let hlen = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(hlen)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.dtype != DType::Float32 {
        return Err(Error::Checkpoint(format!("unsupported dtype {:?}", header.dtype)));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        let scope = scope_from(c.u8()?)?;
        let flags = c.u8()?;
        let ndim = c.u8()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        entries.push(ParamEntry {
            name,
            scope,
            frozen: flags & 1 != 0,
            buffer: flags & 2 != 0,
            value: Tensor::from_vec(shape, data)?,
        });
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    let params = ModelParams::from_entries(&header.spec, header.num_classes, header.projection_dim, header.seed, entries)?;
    Ok(Checkpoint {
        params,
        metadata: header.metadata,
    })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf).map_err(|e| e.context(format!("reading {}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn roundtrip_preserves_everything() {
        let mut p = init_params(&EncoderSpec::resnet_small([4, 8], 1, 8), 3, 11).unwrap();
        p.set_freeze(Scope::Encoder, true);
        let mut metadata = BTreeMap::new();
        metadata.insert("stage".to_string(), "pretrain".to_string());
        let ckpt = Checkpoint { params: p, metadata };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ckpt);
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let p = init_params(&EncoderSpec::toy_conv([4], 8), 2, 1).unwrap();
        let bytes = encode_checkpoint(&Checkpoint {
            params: p,
            metadata: BTreeMap::new(),
        })
        .unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
