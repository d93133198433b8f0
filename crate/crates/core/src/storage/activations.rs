//! Activation record files (`WGAR`).
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! header   magic "WGAR" | version u32 | model_id str | L u32 | d u32 | record_count u64
//! record   conversation_id str | category str | label u8 | L x d f32 (layer 1 first)
//! trailer  crc32 u32 over every preceding byte
//! str      byte length u32 | UTF-8 bytes
//! ```
//!
//! Labels are 0 = in-policy, 1 = out-of-policy, 2 = unlabeled.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::dataset::{ActivationRecord, Label, LabeledActivationSet};
use crate::error::{Error, Result, StorageError};

pub const ACTIVATION_MAGIC: [u8; 4] = *b"WGAR";
pub const ACTIVATION_FORMAT_VERSION: u32 = 1;

/// Longest string accepted when the total input size is unknown.
const MAX_UNBOUNDED_STRING: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationHeader {
    pub format_version: u32,
    pub model_id: String,
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub record_count: u64,
}

struct CrcWriter<W: Write> {
    inner: W,
    hasher: crc32fast::Hasher,
}

impl<W: Write> CrcWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.hasher.update(bytes);
        self.inner.write_all(bytes)
    }

    fn put_str(&mut self, s: &str) -> std::io::Result<()> {
        self.put(&(s.len() as u32).to_le_bytes())?;
        self.put(s.as_bytes())
    }
}

/// Writes `set` to `w`. Records must match the set's `L` and `d` and hold
/// only finite values.
pub fn write_activations_to<W: Write>(set: &LabeledActivationSet, w: W) -> Result<()> {
    set.validate()?;
    for s in std::iter::once(&set.model_id)
        .chain(set.records.iter().flat_map(|r| [&r.conversation_id, &r.category]))
    {
        if u32::try_from(s.len()).is_err() {
            return Err(Error::Configuration("string longer than 4 GiB".into()));
        }
    }
    let layer_count = u32::try_from(set.layer_count)
        .map_err(|_| Error::Configuration("layer count exceeds u32".into()))?;
    let hidden_dim = u32::try_from(set.hidden_dim)
        .map_err(|_| Error::Configuration("hidden size exceeds u32".into()))?;

    let io = |e| Error::from(StorageError::io("<activation stream>", e));
    let mut out = CrcWriter {
        inner: w,
        hasher: crc32fast::Hasher::new(),
    };
    out.put(&ACTIVATION_MAGIC).map_err(io)?;
    out.put(&ACTIVATION_FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    out.put_str(&set.model_id).map_err(io)?;
    out.put(&layer_count.to_le_bytes()).map_err(io)?;
    out.put(&hidden_dim.to_le_bytes()).map_err(io)?;
    out.put(&(set.records.len() as u64).to_le_bytes()).map_err(io)?;

    let mut buf = Vec::with_capacity(set.layer_count * set.hidden_dim * 4);
    for r in &set.records {
        out.put_str(&r.conversation_id).map_err(io)?;
        out.put_str(&r.category).map_err(io)?;
        out.put(&[r.label.to_byte()]).map_err(io)?;
        buf.clear();
        for layer in &r.layers {
            for v in layer {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.put(&buf).map_err(io)?;
    }
    let crc = out.hasher.clone().finalize();
    out.inner.write_all(&crc.to_le_bytes()).map_err(io)?;
    out.inner.flush().map_err(io)?;
    Ok(())
}

pub fn encode_activations(set: &LabeledActivationSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_activations_to(set, &mut out)?;
    Ok(out)
}

pub fn write_activations(set: &LabeledActivationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| StorageError::io(path, e))?;
    write_activations_to(set, BufWriter::new(file)).map_err(|e| match e {
        Error::Storage(StorageError::Io { source, .. }) => StorageError::io(path, source).into(),
        other => other,
    })
}

/// Streaming reader over an activation file.
///
/// Records are yielded one at a time; the checksum is verified once the last
/// record has been read, so callers that need an all-or-nothing result should
/// use [`read_activations`].
pub struct ActivationReader<R: Read> {
    inner: R,
    hasher: crc32fast::Hasher,
    header: ActivationHeader,
    /// Bytes left before the trailer, when the total length is known.
    remaining: Option<u64>,
    next_index: u64,
    finished: bool,
}

fn truncated(what: &str) -> StorageError {
    StorageError::Truncated(format!("unexpected end of input while reading {what}"))
}

impl<R: Read> ActivationReader<R> {
    /// Reads and validates the header. `total_len` is the full input size if
    /// known; with it, impossible record counts are rejected before any
    /// record storage is allocated.
    pub fn new(inner: R, total_len: Option<u64>) -> Result<Self> {
        let mut reader = Self {
            inner,
            hasher: crc32fast::Hasher::new(),
            header: ActivationHeader {
                format_version: 0,
                model_id: String::new(),
                layer_count: 0,
                hidden_dim: 0,
                record_count: 0,
            },
            remaining: total_len.map(|n| n.saturating_sub(4)),
            next_index: 0,
            finished: false,
        };
        if let Some(n) = total_len {
            if n < 4 {
                return Err(truncated("header").into());
            }
        }
        let mut magic = [0u8; 4];
        reader.take_exact(&mut magic, "magic")?;
        if magic != ACTIVATION_MAGIC {
            return Err(StorageError::BadMagic {
                expected: ACTIVATION_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = reader.take_u32("format version")?;
        if version != ACTIVATION_FORMAT_VERSION {
            return Err(StorageError::UnsupportedVersion(version).into());
        }
        let model_id = reader.take_str("model id")?;
        let layer_count = reader.take_u32("layer count")? as usize;
        let hidden_dim = reader.take_u32("hidden size")? as usize;
        let record_count = reader.take_u64("record count")?;
        if layer_count == 0 || hidden_dim == 0 {
            return Err(StorageError::Malformed(format!(
                "layer count and hidden size must be positive (L = {layer_count}, d = {hidden_dim})"
            ))
            .into());
        }
        if let Some(remaining) = reader.remaining {
            let min_record = 9 + 4 * layer_count as u64 * hidden_dim as u64;
            let needed = record_count.checked_mul(min_record);
            if needed.is_none_or(|n| n > remaining) {
                return Err(StorageError::Truncated(format!(
                    "header claims {record_count} records of at least {min_record} bytes, \
                     but only {remaining} bytes follow"
                ))
                .into());
            }
        }
        reader.header = ActivationHeader {
            format_version: version,
            model_id,
            layer_count,
            hidden_dim,
            record_count,
        };
        Ok(reader)
    }

    pub fn header(&self) -> &ActivationHeader {
        &self.header
    }

    fn take_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        if let Some(rem) = self.remaining.as_mut() {
            if (buf.len() as u64) > *rem {
                return Err(truncated(what).into());
            }
            *rem -= buf.len() as u64;
        }
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => truncated(what),
            _ => StorageError::io("<activation stream>", e),
        })?;
        self.hasher.update(buf);
        Ok(())
    }

    fn take_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.take_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn take_u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.take_exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn take_str(&mut self, what: &str) -> Result<String> {
        let len = u64::from(self.take_u32(what)?);
        let limit = self.remaining.unwrap_or(MAX_UNBOUNDED_STRING);
        if len > limit {
            return Err(match self.remaining {
                Some(_) => truncated(what),
                None => StorageError::Malformed(format!("{what} length {len} is implausible")),
            }
            .into());
        }
        let mut buf = vec![0u8; len as usize];
        self.take_exact(&mut buf, what)?;
        String::from_utf8(buf)
            .map_err(|_| StorageError::Malformed(format!("{what} is not valid UTF-8")).into())
    }

    fn read_record(&mut self) -> Result<ActivationRecord> {
        let index = self.next_index as usize;
        let conversation_id = self.take_str("conversation id")?;
        let category = self.take_str("category")?;
        let mut label = [0u8; 1];
        self.take_exact(&mut label, "label")?;
        let label = Label::from_byte(label[0]).ok_or_else(|| {
            StorageError::Malformed(format!("invalid label byte {} in record {index}", label[0]))
        })?;
        let (l, d) = (self.header.layer_count, self.header.hidden_dim);
        let mut raw = vec![0u8; 4 * d];
        let mut layers = Vec::with_capacity(l);
        for layer in 0..l {
            self.take_exact(&mut raw, "activation block")?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(StorageError::NonFinite {
                    record: index,
                    layer: layer + 1,
                    index: i,
                }
                .into());
            }
            layers.push(values);
        }
        self.next_index += 1;
        Ok(ActivationRecord {
            conversation_id,
            category,
            label,
            layers,
        })
    }

    fn finish(&mut self) -> Result<()> {
        self.finished = true;
        if let Some(rem) = self.remaining.filter(|&r| r > 0) {
            return Err(StorageError::TrailingBytes(format!("{rem} bytes after the last record")).into());
        }
        let expected = self.hasher.clone().finalize();
        let mut trailer = [0u8; 4];
        self.inner
            .read_exact(&mut trailer)
            .map_err(|e| match e.kind() {
                ErrorKind::UnexpectedEof => truncated("checksum trailer"),
                _ => StorageError::io("<activation stream>", e),
            })?;
        if u32::from_le_bytes(trailer) != expected {
            return Err(StorageError::Checksum("activation file".into()).into());
        }
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(StorageError::TrailingBytes("data after checksum trailer".into()).into()),
            Err(e) => Err(StorageError::io("<activation stream>", e).into()),
        }
    }
}

impl<R: Read> Iterator for ActivationReader<R> {
    type Item = Result<ActivationRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        if self.next_index == self.header.record_count {
            return match self.finish() {
                Ok(()) => None,
                Err(e) => Some(Err(e)),
            };
        }
        let r = self.read_record();
        if r.is_err() {
            self.finished = true;
        }
        Some(r)
    }
}

fn collect<R: Read>(mut reader: ActivationReader<R>) -> Result<LabeledActivationSet> {
    let header = reader.header().clone();
    // Bounded by the size check in `ActivationReader::new`.
    let mut records = Vec::with_capacity(header.record_count.min(1 << 16) as usize);
    for r in reader.by_ref() {
        records.push(r?);
    }
    Ok(LabeledActivationSet {
        model_id: header.model_id,
        layer_count: header.layer_count,
        hidden_dim: header.hidden_dim,
        records,
    })
}

pub fn decode_activations(bytes: &[u8]) -> Result<LabeledActivationSet> {
    collect(ActivationReader::new(bytes, Some(bytes.len() as u64))?)
}

/// Reads a whole activation file; any error discards every record.
pub fn read_activations(path: impl AsRef<Path>) -> Result<LabeledActivationSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| StorageError::io(path, e))?;
    let len = file.metadata().map_err(|e| StorageError::io(path, e))?.len();
    collect(ActivationReader::new(BufReader::new(file), Some(len))?)
}

/// Opens a streaming reader over `path`.
pub fn open_activations(path: impl AsRef<Path>) -> Result<ActivationReader<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| StorageError::io(path, e))?;
    let len = file.metadata().map_err(|e| StorageError::io(path, e))?.len();
    ActivationReader::new(BufReader::new(file), Some(len))
}
