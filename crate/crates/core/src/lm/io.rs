//! Bit-exact binary checkpoint serialization.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "ULAB"
//! version u32      currently 1
//! header  u32 length + UTF-8 JSON {"config": ..., "step": ...}
//! blocks  repeated until EOF, in canonical layout order:
//!         u32 name length + UTF-8 name
//!         u32 rank, then rank * u32 dims
//!         dims-product * f32 raw data
//! ```
//!
//! Identical parameters serialize to identical bytes; malformed input fails
//! with the byte offset, never a panic.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{block_layout, ModelCheckpoint, ModelConfig, ParamBlock};
use crate::error::{Result, UlabError};

pub const MAGIC: [u8; 4] = *b"ULAB";
pub const VERSION: u32 = 1;

const MAX_RANK: u32 = 8;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    step: u64,
}

pub fn save_checkpoint(m: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| UlabError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(m, &mut w).map_err(|e| UlabError::io(path.display().to_string(), e))?;
    w.flush()
        .map_err(|e| UlabError::io(path.display().to_string(), e))
}

fn write_checkpoint(m: &ModelCheckpoint, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header {
        config: m.config.clone(),
        step: m.step,
    })
    .expect("header serialization cannot fail");
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for b in &m.blocks {
        let name = b.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(b.shape.len() as u32).to_le_bytes())?;
        for &d in &b.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &b.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| UlabError::io(path.display().to_string(), e))?;
    read_checkpoint(&mut BufReader::new(file))
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn fail(&self, detail: impl Into<String>) -> UlabError {
        UlabError::Format {
            offset: self.offset,
            detail: detail.into(),
        }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let start = self.offset;
        self.inner.read_exact(buf).map_err(|_| UlabError::Format {
            offset: start,
            detail: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    /// None at clean EOF, Some(first 4 bytes as u32) otherwise.
    fn try_read_u32(&mut self, what: &str) -> Result<Option<u32>> {
        let mut b = [0u8; 4];
        let mut filled = 0;
        while filled < 4 {
            let n = self
                .inner
                .read(&mut b[filled..])
                .map_err(|e| self.fail(format!("io error reading {what}: {e}")))?;
            if n == 0 {
                if filled == 0 {
                    return Ok(None);
                }
                return Err(UlabError::Format {
                    offset: self.offset + filled as u64,
                    detail: format!("truncated while reading {what}"),
                });
            }
            filled += n;
        }
        self.offset += 4;
        Ok(Some(u32::from_le_bytes(b)))
    }
}

pub fn read_checkpoint(reader: &mut impl Read) -> Result<ModelCheckpoint> {
    let mut cur = Cursor {
        inner: reader,
        offset: 0,
    };

    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(UlabError::Format {
            offset: 0,
            detail: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = cur.read_u32("version")?;
    if version != VERSION {
        return Err(UlabError::Format {
            offset: 4,
            detail: format!("unsupported version {version}, expected {VERSION}"),
        });
    }

    let header_len = cur.read_u32("header length")? as usize;
    if header_len > 1 << 20 {
        return Err(cur.fail(format!("implausible header length {header_len}")));
    }
    let mut header_bytes = vec![0u8; header_len];
    cur.read_exact(&mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| cur.fail(format!("header is not valid JSON: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| cur.fail(format!("invalid config: {e}")))?;

    let expected = block_layout(&header.config);
    let mut blocks = Vec::with_capacity(expected.len());
    while let Some(len) = cur.try_read_u32("block name length")? {
        let name_len = len as usize;
        if name_len > 4096 {
            return Err(cur.fail(format!("implausible block name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes, "block name")?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| cur.fail("block name is not UTF-8"))?;
        let rank = cur.read_u32("block rank")?;
        if rank > MAX_RANK {
            return Err(cur.fail(format!("block `{name}` has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(cur.read_u32("block dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel == 0 || numel > 1 << 28 {
            return Err(cur.fail(format!("block `{name}` has implausible size {numel}")));
        }
        let mut raw = vec![0u8; numel * 4];
        cur.read_exact(&mut raw, "block data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blocks.push(ParamBlock { name, shape, data });
    }

    if blocks.len() != expected.len() {
        return Err(cur.fail(format!(
            "{} blocks on disk, config wants {}",
            blocks.len(),
            expected.len()
        )));
    }
    for (b, (want_name, want_shape)) in blocks.iter().zip(&expected) {
        if &b.name != want_name {
            return Err(cur.fail(format!(
                "block order mismatch: found `{}`, expected `{want_name}`",
                b.name
            )));
        }
        if &b.shape != want_shape {
            return Err(UlabError::shape(format!(
                "block `{}` has shape {:?}, config wants {:?}",
                b.name, b.shape, want_shape
            )));
        }
    }

    let m = ModelCheckpoint {
        config: header.config,
        blocks,
        step: header.step,
    };
    m.assert_finite()?;
    Ok(m)
}
