//! Flat checkpoint archive.
//!
//! Layout: the magic `NORMADAPT1`, a little-endian `u32` header length, a
//! JSON header, then one record per parameter:
//! `u32 path_len | path | u8 ndim | u64 dims… | u8 dtype | u8 trainable | u64 byte_len | bytes`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ParamTree;
use super::transformer::Model;
use crate::error::{Error, Result};
use crate::tensor::{numel, DType, Element, Tensor};

pub const MAGIC: &[u8; 10] = b"NORMADAPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    n_records: usize,
    #[serde(default)]
    adapters: IndexMap<String, f64>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode<T: Element>(model: &Model<T>) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        n_records: model.params.len(),
        adapters: model
            .params
            .adapter_targets()
            .map(|t| {
                (
                    t.to_string(),
                    model.params.adapter_scaling(t).unwrap_or(1.0),
                )
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(
        MAGIC.len() + 4 + header.len() + model.params.total_count() * T::DTYPE.size_of(),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (path, t) in model.params.iter() {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(T::DTYPE.code());
        out.push(u8::from(t.requires_grad()));
        out.extend_from_slice(&((t.numel() * T::DTYPE.size_of()) as u64).to_le_bytes());
        for &v in t.data() {
            v.write_le(&mut out);
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("truncated archive"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Decodes an archive; stored buffers of either dtype are converted to `T`.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<Model<T>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(MAGIC.len())? != MAGIC {
        return Err(corrupt("bad magic; not a NORMADAPT1 archive"));
    }
    let hlen = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(hlen)?)?;
    let mut params = ParamTree::new();
    for _ in 0..header.n_records {
        let plen = cur.u32()? as usize;
        let path = std::str::from_utf8(cur.take(plen)?)
            .map_err(|_| corrupt("path is not UTF-8"))?
            .to_string();
        let ndim = cur.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = DType::from_code(cur.u8()?)
            .ok_or_else(|| corrupt(format!("unknown dtype for `{path}`")))?;
        let trainable = cur.u8()? != 0;
        let blen = cur.u64()? as usize;
        if blen != numel(&shape) * dtype.size_of() {
            return Err(corrupt(format!(
                "`{path}`: {blen} bytes do not fit shape {shape:?}"
            )));
        }
        let raw = cur.take(blen)?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::lit(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::read_le(c)))
                .collect(),
        };
        params.insert(
            path,
            Tensor::new(shape, data)?.with_requires_grad(trainable),
        )?;
    }
    if cur.pos != bytes.len() {
        return Err(corrupt("trailing bytes after last record"));
    }
    for (target, scaling) in header.adapters {
        params.register_adapter(&target, scaling);
    }
    Model::from_parts(header.config, params)
}

pub fn save<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode(model)?)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes)
}
