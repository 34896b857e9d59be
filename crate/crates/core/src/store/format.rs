//! Binary embedding container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header   magic[8] version:u32 L:u32 D:u32 record_count:u64 index_offset:u64
//! records  id_len:u32 id[id_len] domain:u8 emotion:u8 tag_len:u32 tag[tag_len]
//!          T:u32 payload:f32[L*T*D]
//! index    (offset:u64 length:u64) per record
//! ```
//!
//! The index sits at the tail so writes stream, and any record can be
//! decoded from its index entry alone.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use super::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::labels::{Domain, Emotion};

pub const MAGIC: [u8; 8] = *b"SSLEMBD\0";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 8 + 4 + 4 + 4 + 8 + 8;
const INDEX_ENTRY_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingFileHeader {
    pub magic: [u8; 8],
    pub format_version: u32,
    pub num_layers: u32,
    pub dim: u32,
    pub record_count: u64,
    pub index_offset: u64,
}

impl EmbeddingFileHeader {
    fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..8].copy_from_slice(&self.magic);
        out[8..12].copy_from_slice(&self.format_version.to_le_bytes());
        out[12..16].copy_from_slice(&self.num_layers.to_le_bytes());
        out[16..20].copy_from_slice(&self.dim.to_le_bytes());
        out[20..28].copy_from_slice(&self.record_count.to_le_bytes());
        out[28..36].copy_from_slice(&self.index_offset.to_le_bytes());
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || bytes[0..8] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Corrupt(format!(
                "header truncated: {} of {HEADER_LEN} bytes",
                bytes.len()
            )));
        }
        let mut cur = Cursor::new(&bytes[8..HEADER_LEN]);
        let header = Self {
            magic: MAGIC,
            format_version: cur.u32()?,
            num_layers: cur.u32()?,
            dim: cur.u32()?,
            record_count: cur.u64()?,
            index_offset: cur.u64()?,
        };
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        Ok(header)
    }
}

fn body_len(record: &EmbeddingRecord) -> usize {
    4 + record.utterance_id.len() + 1 + 1 + 4 + record.model_tag.len() + 4 + 4 * record.data().len()
}

/// Byte offset each record will occupy when written in the given order.
pub fn layout_offsets(records: &[EmbeddingRecord]) -> Vec<u64> {
    let mut offset = HEADER_LEN as u64;
    records
        .iter()
        .map(|r| {
            let at = offset;
            offset += body_len(r) as u64;
            at
        })
        .collect()
}

fn check_writable(records: &[EmbeddingRecord]) -> Result<(u32, u32)> {
    let Some(first) = records.first() else {
        return Ok((0, 0));
    };
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if r.num_layers() != first.num_layers() {
            return Err(Error::dims(
                format!("layer count of '{}'", r.utterance_id),
                first.num_layers(),
                r.num_layers(),
            ));
        }
        if r.dim() != first.dim() {
            return Err(Error::dims(
                format!("feature dim of '{}'", r.utterance_id),
                first.dim(),
                r.dim(),
            ));
        }
        if !seen.insert(r.utterance_id.as_str()) {
            return Err(Error::DuplicateKey(r.utterance_id.clone()));
        }
    }
    let to_u32 =
        |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::Validation(format!("{what} {v} exceeds u32")));
    Ok((to_u32(first.num_layers(), "layer count")?, to_u32(first.dim(), "dim")?))
}

pub fn write_embedding_file(records: &[EmbeddingRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (num_layers, dim) = check_writable(records)?;
    let offsets = layout_offsets(records);
    let index_offset = records
        .last()
        .map_or(HEADER_LEN as u64, |r| offsets[offsets.len() - 1] + body_len(r) as u64);
    let header = EmbeddingFileHeader {
        magic: MAGIC,
        format_version: FORMAT_VERSION,
        num_layers,
        dim,
        record_count: records.len() as u64,
        index_offset,
    };

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&header.encode()).map_err(io)?;
    for r in records {
        w.write_all(&(r.utterance_id.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(r.utterance_id.as_bytes()).map_err(io)?;
        w.write_all(&[r.domain.code(), r.emotion.index() as u8]).map_err(io)?;
        w.write_all(&(r.model_tag.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(r.model_tag.as_bytes()).map_err(io)?;
        w.write_all(&(r.num_frames() as u32).to_le_bytes()).map_err(io)?;
        for v in r.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    for (r, off) in records.iter().zip(&offsets) {
        w.write_all(&off.to_le_bytes()).map_err(io)?;
        w.write_all(&(body_len(r) as u64).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| {
                Error::Corrupt(format!(
                    "truncated payload: wanted {n} bytes at {}, {} available",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Corrupt("string field is not utf-8".into()))
    }
}

/// In-memory view of an embedding file with O(1) access to each record.
#[derive(Debug)]
pub struct EmbeddingReader {
    header: EmbeddingFileHeader,
    bytes: Vec<u8>,
    index: Vec<(u64, u64)>,
}

impl EmbeddingReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(bytes)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let header = EmbeddingFileHeader::decode(&bytes)?;
        let count =
            usize::try_from(header.record_count).map_err(|_| Error::Corrupt("record count overflows usize".into()))?;
        let index_start = usize::try_from(header.index_offset)
            .ok()
            .filter(|&s| s >= HEADER_LEN && s <= bytes.len())
            .ok_or_else(|| {
                Error::Corrupt(format!(
                    "index offset {} outside file of {} bytes",
                    header.index_offset,
                    bytes.len()
                ))
            })?;
        let index_len = count
            .checked_mul(INDEX_ENTRY_LEN)
            .ok_or_else(|| Error::Corrupt("record count overflows index".into()))?;
        if bytes.len() - index_start != index_len {
            return Err(Error::Corrupt(format!(
                "index holds {} bytes, expected {index_len} for {count} records",
                bytes.len() - index_start
            )));
        }
        let mut cur = Cursor::new(&bytes[index_start..]);
        let mut index = Vec::with_capacity(count);
        for i in 0..count {
            let (off, len) = (cur.u64()?, cur.u64()?);
            let end = off.saturating_add(len);
            if off < HEADER_LEN as u64 || end > header.index_offset {
                return Err(Error::Corrupt(format!(
                    "index entry {i} ({off}+{len}) outside record region"
                )));
            }
            index.push((off, len));
        }
        Ok(Self { header, bytes, index })
    }

    pub fn header(&self) -> &EmbeddingFileHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn record(&self, i: usize) -> Result<EmbeddingRecord> {
        let (off, len) = self.index[i];
        let body = &self.bytes[off as usize..(off + len) as usize];
        let mut cur = Cursor::new(body);
        let utterance_id = cur.string()?;
        let domain = Domain::from_code(cur.u8()?)
            .ok_or_else(|| Error::Corrupt(format!("record '{utterance_id}': bad domain code")))?;
        let emotion = Emotion::from_index(cur.u8()? as usize)
            .ok_or_else(|| Error::Corrupt(format!("record '{utterance_id}': bad emotion code")))?;
        let model_tag = cur.string()?;
        let frames = cur.u32()? as usize;
        let layers = self.header.num_layers as usize;
        let dim = self.header.dim as usize;
        let n = layers * frames * dim;
        let raw = cur.take(4 * n).map_err(|e| match e {
            Error::Corrupt(m) => Error::Corrupt(format!("record '{utterance_id}': {m}")),
            other => other,
        })?;
        if cur.pos != body.len() {
            return Err(Error::Corrupt(format!(
                "record '{utterance_id}': {} trailing bytes",
                body.len() - cur.pos
            )));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        EmbeddingRecord::new(utterance_id, domain, emotion, model_tag, (layers, frames, dim), data)
    }

    /// Decodes every record, in parallel, preserving file order.
    pub fn records(&self) -> Result<Vec<EmbeddingRecord>> {
        (0..self.len()).into_par_iter().map(|i| self.record(i)).collect()
    }
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<Vec<EmbeddingRecord>> {
    EmbeddingReader::open(path)?.records()
}

/// Outcome of linting an embedding file without aborting on the first bad record.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct LintReport {
    pub record_count: usize,
    pub num_layers: u32,
    pub dim: u32,
    /// `domain/emotion` → count of records that decoded cleanly.
    pub counts: BTreeMap<String, usize>,
    pub errors: Vec<String>,
}

impl LintReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

pub fn lint_embedding_file(path: impl AsRef<Path>) -> LintReport {
    let mut report = LintReport::default();
    let reader = match EmbeddingReader::open(path) {
        Ok(r) => r,
        Err(e) => {
            report.errors.push(e.to_string());
            return report;
        }
    };
    report.record_count = reader.len();
    report.num_layers = reader.header().num_layers;
    report.dim = reader.header().dim;
    let mut ids = HashSet::new();
    for i in 0..reader.len() {
        match reader.record(i) {
            Ok(r) => {
                if !ids.insert(r.utterance_id.clone()) {
                    report
                        .errors
                        .push(format!("duplicate utterance id '{}'", r.utterance_id));
                }
                *report.counts.entry(format!("{}/{}", r.domain, r.emotion)).or_default() += 1;
            }
            Err(e) => report.errors.push(format!("record {i}: {e}")),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, shape: (usize, usize, usize), seed: f32) -> EmbeddingRecord {
        let n = shape.0 * shape.1 * shape.2;
        let data = (0..n).map(|i| seed + i as f32 * 0.25 - 1.5).collect();
        EmbeddingRecord::new(id, Domain::Speech, Emotion::Angry, "tag", shape, data).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let recs = vec![record("a", (12, 5, 4), 0.1), record("b", (12, 3, 4), -7.3)];
        write_embedding_file(&recs, &path).unwrap();
        let back = read_embedding_file(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (x, y) in recs.iter().zip(&back) {
            assert_eq!(x.utterance_id, y.utterance_id);
            let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(recs, back);
    }

    #[test]
    fn empty_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        write_embedding_file(&[], &path).unwrap();
        let reader = EmbeddingReader::open(&path).unwrap();
        assert_eq!(reader.header().record_count, 0);
        assert!(reader.records().unwrap().is_empty());
    }

    #[test]
    fn mixed_dims_and_duplicates_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let err = write_embedding_file(&[record("a", (2, 1, 3), 0.0), record("b", (2, 1, 4), 0.0)], &path);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
        let err = write_embedding_file(&[record("a", (2, 1, 3), 0.0), record("b", (3, 1, 3), 0.0)], &path);
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
        let err = write_embedding_file(&[record("a", (2, 1, 3), 0.0), record("a", (2, 1, 3), 1.0)], &path);
        assert!(matches!(err, Err(Error::DuplicateKey(id)) if id == "a"));
    }

    #[test]
    fn io_failure_names_path() {
        let err = write_embedding_file(&[], "/nonexistent-dir/zzz/e.bin").unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/zzz/e.bin"));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_embedding_file(&[record("a", (1, 1, 1), 0.0)], &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        assert!(matches!(EmbeddingReader::from_bytes(bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_embedding_file(&[record("a", (2, 2, 2), 0.0)], &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [10, HEADER_LEN + 3, bytes.len() - 1] {
            let err = EmbeddingReader::from_bytes(bytes[..cut].to_vec()).unwrap_err();
            assert!(matches!(err, Error::Corrupt(_)), "cut {cut}: {err:?}");
        }
    }

    #[test]
    fn nan_payload_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.bin");
        let recs = [record("first", (1, 2, 2), 0.0), record("second", (1, 2, 2), 1.0)];
        write_embedding_file(&recs, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // overwrite the last f32 of the second record's payload
        let offsets = layout_offsets(&recs);
        let payload_end = offsets[1] as usize + body_len(&recs[1]);
        bytes[payload_end - 4..payload_end].copy_from_slice(&f32::NAN.to_le_bytes());
        let reader = EmbeddingReader::from_bytes(bytes).unwrap();
        assert!(reader.record(0).is_ok());
        match reader.records() {
            Err(Error::Validation(msg)) => assert!(msg.contains("second"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lint_collects_per_stratum_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.bin");
        write_embedding_file(&[record("a", (1, 1, 2), 0.0), record("b", (1, 1, 2), 0.0)], &path).unwrap();
        let report = lint_embedding_file(&path);
        assert!(report.is_clean());
        assert_eq!(report.counts["speech/angry"], 2);
        let bad = lint_embedding_file(dir.path().join("missing.bin"));
        assert!(!bad.is_clean());
    }
}
