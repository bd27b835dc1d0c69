//! AMIE (sequence embeddings) and AMIV (vocabulary table plus token ids) binary files.
//!
//! Both are little-endian with a 4-byte magic and a `u32` version of 1.

use std::fs;
use std::path::Path;

use super::{SourceKind, TokenBatch, Vocabulary};
use crate::error::{AmiError, Result};

const EMBED_MAGIC: &[u8; 4] = b"AMIE";
const VOCAB_MAGIC: &[u8; 4] = b"AMIV";
const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> AmiError {
        AmiError::Format { offset: self.pos as u64, msg: msg.into() }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(self.err(format!(
                "truncated {what}: need {len} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expect {
            self.pos -= 4;
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expect)
            )));
        }
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32("version")?;
        if v != VERSION {
            self.pos -= 4;
            return Err(self.err(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn count(&self, dims: &[u32], what: &str) -> Result<usize> {
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| self.err(format!("{what} size overflows")))
    }

    fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| self.err(format!("{what} size overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| AmiError::Shape(format!("dimension {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn parse_embed_bytes(buf: &[u8]) -> Result<TokenBatch> {
    let mut r = Reader::new(buf);
    r.magic(EMBED_MAGIC)?;
    r.version()?;
    let count = r.u32("count")?;
    let l_x = r.u32("l_X")?;
    let d_x = r.u32("d_X")?;
    if l_x == 0 || d_x == 0 {
        return Err(AmiError::Format { offset: 12, msg: "zero dimension in header".into() });
    }
    let total = r.count(&[count, l_x, d_x], "payload")?;
    let values = r.f32s(total, "payload")?;
    r.finish()?;
    TokenBatch::new(values, count as usize, l_x as usize, d_x as usize, SourceKind::EmbedFile)
}

pub fn embed_bytes(batch: &TokenBatch) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + 4 * batch.values().len());
    out.extend_from_slice(EMBED_MAGIC);
    push_u32(&mut out, VERSION as usize)?;
    push_u32(&mut out, batch.n())?;
    push_u32(&mut out, batch.l_x())?;
    push_u32(&mut out, batch.d_x())?;
    push_f32s(&mut out, batch.values());
    Ok(out)
}

pub fn load_embed_file(path: impl AsRef<Path>) -> Result<TokenBatch> {
    parse_embed_bytes(&fs::read(path)?)
}

/// Writes values narrowed to f32.
pub fn save_embed_file(path: impl AsRef<Path>, batch: &TokenBatch) -> Result<()> {
    fs::write(path, embed_bytes(batch)?)?;
    Ok(())
}

/// Contents of an AMIV file.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabFile {
    pub vocab: Vocabulary,
    pub count: usize,
    pub l_x: usize,
    pub ids: Vec<u32>,
}

impl VocabFile {
    /// Embeds the stored id sequences; ids are kept on the batch for index-level DP.
    pub fn to_batch(&self) -> Result<TokenBatch> {
        let values = self.vocab.lookup(&self.ids)?;
        TokenBatch::new(values, self.count, self.l_x, self.vocab.d_x(), SourceKind::IndexFile)?
            .with_token_ids(self.ids.clone())
    }
}

pub fn parse_vocab_bytes(buf: &[u8]) -> Result<VocabFile> {
    let mut r = Reader::new(buf);
    r.magic(VOCAB_MAGIC)?;
    r.version()?;
    let k = r.u32("k")?;
    let d_x = r.u32("d_X")?;
    if k == 0 || d_x == 0 {
        return Err(AmiError::Format { offset: 8, msg: "zero dimension in header".into() });
    }
    let total = r.count(&[k, d_x], "table")?;
    let table = r.f32s(total, "table")?;
    let count = r.u32("count")?;
    let l_x = r.u32("l_X")?;
    let n_ids = r.count(&[count, l_x], "ids")?;
    let ids_start = r.pos;
    let raw = r.take(n_ids.checked_mul(4).ok_or_else(|| r.err("ids size overflows"))?, "ids")?;
    let ids: Vec<u32> = raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some(pos) = ids.iter().position(|&i| i >= k) {
        return Err(AmiError::Format {
            offset: (ids_start + 4 * pos) as u64,
            msg: format!("token id {} out of range for k = {k}", ids[pos]),
        });
    }
    r.finish()?;
    Ok(VocabFile {
        vocab: Vocabulary::new(k as usize, d_x as usize, table)?,
        count: count as usize,
        l_x: l_x as usize,
        ids,
    })
}

pub fn vocab_bytes(file: &VocabFile) -> Result<Vec<u8>> {
    if file.ids.len() != file.count * file.l_x {
        return Err(AmiError::Shape(format!("{} ids for {}x{}", file.ids.len(), file.count, file.l_x)));
    }
    let mut out = Vec::new();
    out.extend_from_slice(VOCAB_MAGIC);
    push_u32(&mut out, VERSION as usize)?;
    push_u32(&mut out, file.vocab.k())?;
    push_u32(&mut out, file.vocab.d_x())?;
    push_f32s(&mut out, file.vocab.table());
    push_u32(&mut out, file.count)?;
    push_u32(&mut out, file.l_x)?;
    for &id in &file.ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    Ok(out)
}

pub fn load_vocab_file(path: impl AsRef<Path>) -> Result<VocabFile> {
    parse_vocab_bytes(&fs::read(path)?)
}

pub fn save_vocab_file(path: impl AsRef<Path>, file: &VocabFile) -> Result<()> {
    fs::write(path, vocab_bytes(file)?)?;
    Ok(())
}
