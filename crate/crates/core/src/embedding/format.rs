//! `GNE1` binary embedding files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    "GNE1"
//! u16      format version
//! u16      pooling code (0 mean, 1 cls, 2 pre-pooled)
//! u32      dimension D
//! u64      record count
//! u8       has token states
//! u16 + n  retriever id (UTF-8)
//! records:
//!   u16 + n  doc id (UTF-8)
//!   [u32 T, T*D f32]   only when the header has token states
//!   D f32    pooled vector
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DocumentEmbedding, EmbeddingSet, EmbeddingSetHeader, Pooling, TokenStates};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GNE1";
pub const FORMAT_VERSION: u16 = 1;

/// Streaming reader over the records of a `GNE1` file.
///
/// Yields exactly `record_count` records, validating each one, then checks
/// that the input is exhausted.
pub struct EmbeddingReader<R> {
    header: EmbeddingSetHeader,
    inner: R,
    next_index: u64,
    seen: HashSet<String>,
    finished: bool,
}

impl EmbeddingReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufReader::new(file))
    }
}

impl<R: Read> EmbeddingReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let header = read_header(&mut inner)?;
        Ok(Self {
            header,
            inner,
            next_index: 0,
            seen: HashSet::new(),
            finished: false,
        })
    }

    pub fn header(&self) -> &EmbeddingSetHeader {
        &self.header
    }

    fn read_record(&mut self) -> Result<DocumentEmbedding> {
        let index = self.next_index;
        let truncated = |e: io::Error| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                Error::TruncatedRecord(index)
            } else {
                Error::Stream(e)
            }
        };
        let d = self.header.dimension;
        let id_len = read_u16(&mut self.inner).map_err(truncated)? as usize;
        let mut id = vec![0u8; id_len];
        self.inner.read_exact(&mut id).map_err(truncated)?;
        let doc_id = String::from_utf8(id)
            .map_err(|_| Error::InvalidHeader(format!("doc_id of record {index} is not UTF-8")))?;

        let token_states = if self.header.has_token_states {
            let rows = read_u32(&mut self.inner).map_err(truncated)? as usize;
            if rows == 0 {
                return Err(Error::EmptyTokenStates);
            }
            let data = read_f32s(&mut self.inner, rows * d).map_err(truncated)?;
            Some(TokenStates::new(rows, d, data)?)
        } else {
            None
        };
        let pooled = read_f32s(&mut self.inner, d).map_err(truncated)?;

        let record = DocumentEmbedding {
            doc_id,
            pooled,
            token_states,
        };
        record.validate(&self.header)?;
        if !self.seen.insert(record.doc_id.clone()) {
            return Err(Error::DuplicateDocId(record.doc_id));
        }
        Ok(record)
    }
}

impl<R: Read> Iterator for EmbeddingReader<R> {
    type Item = Result<DocumentEmbedding>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        if self.next_index == self.header.record_count {
            self.finished = true;
            let mut probe = [0u8; 1];
            return match self.inner.read(&mut probe) {
                Ok(0) => None,
                Ok(_) => Some(Err(Error::TrailingBytes(self.header.record_count))),
                Err(e) => Some(Err(Error::Stream(e))),
            };
        }
        let out = self.read_record();
        self.next_index += 1;
        if out.is_err() {
            self.finished = true;
        }
        Some(out)
    }
}

/// Reads a whole `GNE1` file into memory.
pub fn read_embedding_set(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let reader = EmbeddingReader::open(path)?;
    let header = reader.header().clone();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingSet { header, records })
}

/// Writes a `GNE1` file atomically (temp file in the same directory, then rename).
pub fn write_embedding_set(
    header: &EmbeddingSetHeader,
    records: &[DocumentEmbedding],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    crate::io::write_atomic(path, |w| write_embedding_set_to(header, records, w))
}

pub fn write_embedding_set_to<W: Write>(
    header: &EmbeddingSetHeader,
    records: &[DocumentEmbedding],
    out: W,
) -> Result<()> {
    if header.record_count != records.len() as u64 {
        return Err(Error::CountMismatch {
            header: header.record_count,
            actual: records.len() as u64,
        });
    }
    header.validate()?;
    let mut w = BufWriter::new(out);
    w.write_all(MAGIC)?;
    w.write_all(&header.format_version.to_le_bytes())?;
    w.write_all(&header.pooling.code().to_le_bytes())?;
    w.write_all(&u32_len(header.dimension, "dimension")?.to_le_bytes())?;
    w.write_all(&header.record_count.to_le_bytes())?;
    w.write_all(&[u8::from(header.has_token_states)])?;
    write_str(&mut w, &header.retriever_id)?;

    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        r.validate(header)?;
        if !seen.insert(r.doc_id.as_str()) {
            return Err(Error::DuplicateDocId(r.doc_id.clone()));
        }
        write_str(&mut w, &r.doc_id)?;
        if let Some(ts) = &r.token_states {
            w.write_all(&u32_len(ts.rows(), "token count")?.to_le_bytes())?;
            write_f32s(&mut w, ts.as_slice())?;
        }
        write_f32s(&mut w, &r.pooled)?;
    }
    w.flush()?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<EmbeddingSetHeader> {
    let short = |e: io::Error| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::InvalidHeader("truncated header".into())
        } else {
            Error::Stream(e)
        }
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = read_u16(r).map_err(short)?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let code = read_u16(r).map_err(short)?;
    let pooling = Pooling::from_code(code)
        .ok_or_else(|| Error::InvalidHeader(format!("unknown pooling code {code}")))?;
    let dimension = read_u32(r).map_err(short)? as usize;
    let record_count = read_u64(r).map_err(short)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(short)?;
    let has_token_states = match flag[0] {
        0 => false,
        1 => true,
        other => {
            return Err(Error::InvalidHeader(format!(
                "has_token_states byte must be 0 or 1, found {other}"
            )))
        }
    };
    let len = read_u16(r).map_err(short)? as usize;
    let mut id = vec![0u8; len];
    r.read_exact(&mut id).map_err(short)?;
    let retriever_id = String::from_utf8(id)
        .map_err(|_| Error::InvalidHeader("retriever_id is not UTF-8".into()))?;
    let header = EmbeddingSetHeader {
        format_version: version,
        retriever_id,
        dimension,
        record_count,
        pooling,
        has_token_states,
    };
    header.validate()?;
    Ok(header)
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidHeader(format!("{what} {n} does not fit in u32")))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| {
        Error::InvalidHeader(format!("string of {} bytes exceeds u16 length", s.len()))
    })?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_f32s<W: Write>(w: &mut W, xs: &[f32]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u16<R: Read>(r: &mut R) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
