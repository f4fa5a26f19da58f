//! Binary container for per-utterance, per-layer frame embeddings.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! [magic "LPROBE01"]
//! [header length: u64][header: JSON]
//! [payload: row-major f32 matrices, frame-major, concatenated]
//! [footer: entry count u64,
//!          entries sorted by (utterance_id, layer):
//!            id length u32, id bytes, layer u32, byte offset u64, frames u64,
//!          crc32 of the footer bytes above: u32]
//! [footer offset: u64]
//! ```
//!
//! One file holds one (model, condition). Once the footer is written the
//! file is immutable and any number of readers may share a [`StoreReader`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LPROBE01";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32_LE: &str = "f32le";

/// A positive rational frame rate in Hz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rational {
    pub num: u32,
    pub den: u32,
}

impl Rational {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Argument(format!("frame rate {num}/{den} must be positive")));
        }
        Ok(Self { num, den })
    }

    pub fn integer(hz: u32) -> Self {
        Self::new(hz, 1).expect("nonzero rate")
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl std::str::FromStr for Rational {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("cannot parse frame rate `{s}`"));
        match s.split_once('/') {
            Some((n, d)) => Rational::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => Rational::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub version: u32,
    pub model_id: String,
    pub num_layers: usize,
    pub hidden_dim: Vec<usize>,
    pub frame_rate_hz: Vec<Rational>,
    pub dtype: String,
    /// False for randomly initialized (untrained) encoders.
    pub trained: bool,
    /// Free-form note, e.g. what layer 0 denotes for this extractor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl StoreHeader {
    /// Header with the same width and frame rate on every layer.
    pub fn uniform(model_id: impl Into<String>, num_layers: usize, dim: usize, rate: Rational, trained: bool) -> Self {
        Self {
            version: FORMAT_VERSION,
            model_id: model_id.into(),
            num_layers,
            hidden_dim: vec![dim; num_layers],
            frame_rate_hz: vec![rate; num_layers],
            dtype: DTYPE_F32_LE.into(),
            trained,
            note: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported store version {}", self.version)));
        }
        if self.dtype != DTYPE_F32_LE {
            return Err(Error::Format(format!("unsupported dtype `{}`", self.dtype)));
        }
        if self.num_layers == 0 {
            return Err(Error::Format("store declares zero layers".into()));
        }
        if self.hidden_dim.len() != self.num_layers || self.frame_rate_hz.len() != self.num_layers {
            return Err(Error::Format(format!(
                "header lists {} dims and {} frame rates for {} layers",
                self.hidden_dim.len(),
                self.frame_rate_hz.len(),
                self.num_layers
            )));
        }
        if self.hidden_dim.contains(&0) {
            return Err(Error::Format("hidden_dim entries must be positive".into()));
        }
        if self.frame_rate_hz.iter().any(|r| r.num == 0 || r.den == 0) {
            return Err(Error::Format("frame rates must be positive".into()));
        }
        Ok(())
    }
}

/// Frame-level hidden states of one utterance at one layer (T x d, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensor {
    pub utterance_id: String,
    pub layer: usize,
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl LayerTensor {
    pub fn new(utterance_id: impl Into<String>, layer: usize, frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Input(format!("tensor shape {frames}x{dim} must be nonempty")));
        }
        if data.len() != frames * dim {
            return Err(Error::Input(format!(
                "tensor data has {} values, expected {frames}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("tensor contains non-finite values".into()));
        }
        Ok(Self {
            utterance_id: utterance_id.into(),
            layer,
            frames,
            dim,
            data,
        })
    }

    pub fn from_rows(utterance_id: impl Into<String>, layer: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Input("ragged rows".into()));
        }
        Self::new(utterance_id, layer, rows.len(), dim, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }
}

/// Maps a time in milliseconds to a frame index:
/// `floor(t_ms * rate / 1000)` clamped into `[0, frames - 1]`.
pub fn frame_index_for_time(t_ms: i64, rate: Rational, frames: usize) -> usize {
    assert!(frames >= 1, "frame count must be positive");
    if t_ms <= 0 {
        return 0;
    }
    let idx = (i128::from(t_ms) * i128::from(rate.num)) / (i128::from(rate.den) * 1000);
    usize::try_from(idx).unwrap_or(usize::MAX).min(frames - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct IndexEntry {
    offset: u64,
    frames: u64,
}

fn header_blob(header: &StoreHeader) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(header)?)
}

/// Single-writer store builder. Call [`StoreWriter::finish`] to write the index.
pub struct StoreWriter {
    out: BufWriter<File>,
    header: StoreHeader,
    position: u64,
    index: BTreeMap<(String, usize), IndexEntry>,
    utterances: BTreeSet<String>,
}

impl StoreWriter {
    pub fn create(path: impl AsRef<Path>, header: StoreHeader) -> Result<Self> {
        header.validate()?;
        let blob = header_blob(&header)?;
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&(blob.len() as u64).to_le_bytes())?;
        out.write_all(&blob)?;
        Ok(Self {
            out,
            header,
            position: (MAGIC.len() + 8 + blob.len()) as u64,
            index: BTreeMap::new(),
            utterances: BTreeSet::new(),
        })
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    /// Appends all layers of one utterance. Nothing is written unless every
    /// tensor matches the header.
    pub fn write_utterance(&mut self, utterance_id: &str, tensors: &[LayerTensor]) -> Result<()> {
        if utterance_id.is_empty() || utterance_id.chars().any(char::is_whitespace) {
            return Err(Error::Argument(format!("invalid utterance id `{utterance_id}`")));
        }
        if self.utterances.contains(utterance_id) {
            return Err(Error::Duplicate(format!("utterance `{utterance_id}` already stored")));
        }
        if tensors.len() != self.header.num_layers {
            return Err(Error::Format(format!(
                "utterance `{utterance_id}`: {} tensors for {} layers",
                tensors.len(),
                self.header.num_layers
            )));
        }
        for (layer, t) in tensors.iter().enumerate() {
            if t.layer != layer {
                return Err(Error::Format(format!(
                    "utterance `{utterance_id}`: tensor {layer} is labelled layer {}",
                    t.layer
                )));
            }
            if t.dim != self.header.hidden_dim[layer] {
                return Err(Error::Format(format!(
                    "utterance `{utterance_id}` layer {layer}: dim {} but header says {}",
                    t.dim, self.header.hidden_dim[layer]
                )));
            }
            if t.utterance_id != utterance_id {
                return Err(Error::Format(format!(
                    "tensor for `{}` passed under id `{utterance_id}`",
                    t.utterance_id
                )));
            }
        }
        for (layer, t) in tensors.iter().enumerate() {
            let mut bytes = Vec::with_capacity(t.data.len() * 4);
            for v in &t.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            self.out.write_all(&bytes)?;
            self.index.insert(
                (utterance_id.to_string(), layer),
                IndexEntry {
                    offset: self.position,
                    frames: t.frames as u64,
                },
            );
            self.position += bytes.len() as u64;
        }
        self.utterances.insert(utterance_id.to_string());
        Ok(())
    }

    /// Writes the index footer and closes the file.
    pub fn finish(mut self) -> Result<()> {
        let mut footer = Vec::new();
        footer.extend_from_slice(&(self.index.len() as u64).to_le_bytes());
        for ((id, layer), e) in &self.index {
            footer.extend_from_slice(&(id.len() as u32).to_le_bytes());
            footer.extend_from_slice(id.as_bytes());
            footer.extend_from_slice(&(*layer as u32).to_le_bytes());
            footer.extend_from_slice(&e.offset.to_le_bytes());
            footer.extend_from_slice(&e.frames.to_le_bytes());
        }
        let crc = crc32fast::hash(&footer);
        footer.extend_from_slice(&crc.to_le_bytes());
        self.out.write_all(&footer)?;
        self.out.write_all(&self.position.to_le_bytes())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Random-access reader. Shareable across threads.
pub struct StoreReader {
    file: Mutex<File>,
    header: StoreHeader,
    index: BTreeMap<(String, usize), IndexEntry>,
    utterances: Vec<String>,
}

impl fmt::Debug for StoreReader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StoreReader")
            .field("header", &self.header)
            .field("utterances", &self.utterances.len())
            .finish()
    }
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
            .ok_or_else(|| Error::Format("truncated index footer".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl StoreReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut file = File::open(path)?;
        let file_len = file.metadata()?.len();

        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)
            .map_err(|_| Error::Format("file too short for magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let mut len_buf = [0u8; 8];
        file.read_exact(&mut len_buf)
            .map_err(|_| Error::Format("truncated header".into()))?;
        let header_len = u64::from_le_bytes(len_buf);
        if header_len > file_len.saturating_sub(16) {
            return Err(Error::Format("header length exceeds file".into()));
        }
        let mut blob = vec![0u8; header_len as usize];
        file.read_exact(&mut blob)?;
        let header: StoreHeader =
            serde_json::from_slice(&blob).map_err(|e| Error::Format(format!("header: {e}")))?;
        header.validate()?;
        let payload_start = 16 + header_len;

        if file_len < payload_start + 8 + 8 + 4 {
            return Err(Error::Format("file too short for index footer".into()));
        }
        file.seek(SeekFrom::End(-8))?;
        file.read_exact(&mut len_buf)?;
        let footer_offset = u64::from_le_bytes(len_buf);
        let footer_end = file_len - 8;
        if footer_offset < payload_start || footer_offset + 12 > footer_end {
            return Err(Error::Format(format!("footer offset {footer_offset} out of bounds")));
        }
        let mut footer = vec![0u8; (footer_end - footer_offset) as usize];
        file.seek(SeekFrom::Start(footer_offset))?;
        file.read_exact(&mut footer)?;
        let (body, crc_bytes) = footer.split_at(footer.len() - 4);
        let crc = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != crc {
            return Err(Error::Format("index footer checksum mismatch".into()));
        }

        let mut cur = Cursor { buf: body, pos: 0 };
        let count = cur.u64()?;
        let mut index = BTreeMap::new();
        let mut spans = Vec::new();
        let mut prev: Option<(String, usize)> = None;
        for _ in 0..count {
            let id_len = cur.u32()? as usize;
            let id = std::str::from_utf8(cur.take(id_len)?)
                .map_err(|_| Error::Format("utterance id is not UTF-8".into()))?
                .to_string();
            let layer = cur.u32()? as usize;
            let offset = cur.u64()?;
            let frames = cur.u64()?;
            if layer >= header.num_layers {
                return Err(Error::Format(format!("index entry for `{id}` names layer {layer}")));
            }
            if frames == 0 {
                return Err(Error::Format(format!("index entry `{id}`/{layer} has zero frames")));
            }
            let bytes = frames
                .checked_mul(header.hidden_dim[layer] as u64 * 4)
                .ok_or_else(|| Error::Format("index entry size overflows".into()))?;
            if offset < payload_start || offset.checked_add(bytes).is_none_or(|end| end > footer_offset) {
                return Err(Error::Format(format!("index entry `{id}`/{layer} points outside the payload")));
            }
            let key = (id, layer);
            if prev.as_ref().is_some_and(|p| *p >= key) {
                return Err(Error::Format("index entries are not strictly sorted".into()));
            }
            prev = Some(key.clone());
            spans.push((offset, offset + bytes));
            index.insert(key, IndexEntry { offset, frames });
        }
        if cur.pos != body.len() {
            return Err(Error::Format("trailing bytes in index footer".into()));
        }
        spans.sort_unstable();
        if spans.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(Error::Format("index entries overlap".into()));
        }

        let mut utterances: Vec<String> = Vec::new();
        for (id, _) in index.keys() {
            if utterances.last() != Some(id) {
                utterances.push(id.clone());
            }
        }
        for id in &utterances {
            for layer in 0..header.num_layers {
                if !index.contains_key(&(id.clone(), layer)) {
                    return Err(Error::Format(format!("utterance `{id}` lacks layer {layer}")));
                }
            }
        }

        Ok(Self {
            file: Mutex::new(file),
            header,
            index,
            utterances,
        })
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn num_layers(&self) -> usize {
        self.header.num_layers
    }

    /// Stored utterance ids, sorted.
    pub fn utterance_ids(&self) -> &[String] {
        &self.utterances
    }

    pub fn contains(&self, utterance_id: &str) -> bool {
        self.utterances.binary_search_by(|u| u.as_str().cmp(utterance_id)).is_ok()
    }

    pub fn frames(&self, utterance_id: &str, layer: usize) -> Result<usize> {
        Ok(self.entry(utterance_id, layer)?.frames as usize)
    }

    fn entry(&self, utterance_id: &str, layer: usize) -> Result<IndexEntry> {
        if layer >= self.header.num_layers {
            return Err(Error::Range {
                what: "layer",
                index: layer,
                limit: self.header.num_layers,
            });
        }
        self.index
            .get(&(utterance_id.to_string(), layer))
            .copied()
            .ok_or_else(|| Error::Lookup(format!("utterance `{utterance_id}` not in store")))
    }

    pub fn read_layer(&self, utterance_id: &str, layer: usize) -> Result<LayerTensor> {
        let entry = self.entry(utterance_id, layer)?;
        let dim = self.header.hidden_dim[layer];
        let frames = entry.frames as usize;
        let mut bytes = vec![0u8; frames * dim * 4];
        {
            let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
            file.seek(SeekFrom::Start(entry.offset))?;
            file.read_exact(&mut bytes)?;
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        LayerTensor::new(utterance_id, layer, frames, dim, data)
            .map_err(|e| Error::Format(format!("`{utterance_id}`/{layer}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(id: &str, layer: usize, frames: usize, dim: usize, fill: f32) -> LayerTensor {
        LayerTensor::new(id, layer, frames, dim, vec![fill; frames * dim]).unwrap()
    }

    fn two_layer_store(dir: &Path) -> std::path::PathBuf {
        let path = dir.join("s.lprobe");
        let mut w = StoreWriter::create(&path, StoreHeader::uniform("m", 2, 4, Rational::integer(50), true)).unwrap();
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.5 - 1.0).collect();
        let l1 = LayerTensor::new("u1", 1, 3, 4, data).unwrap();
        w.write_utterance("u1", &[tensor("u1", 0, 3, 4, 1.0), l1]).unwrap();
        w.finish().unwrap();
        path
    }

    #[test]
    fn round_trip_layer() {
        let dir = tempfile::tempdir().unwrap();
        let r = StoreReader::open(two_layer_store(dir.path())).unwrap();
        let t = r.read_layer("u1", 1).unwrap();
        assert_eq!((t.frames(), t.dim()), (3, 4));
        let expected: Vec<f32> = (0..12).map(|i| i as f32 * 0.5 - 1.0).collect();
        assert_eq!(t.data(), &expected[..]);
        assert!(r.read_layer("u1", 0).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn read_errors() {
        let dir = tempfile::tempdir().unwrap();
        let r = StoreReader::open(two_layer_store(dir.path())).unwrap();
        assert!(matches!(r.read_layer("u1", 2), Err(Error::Range { .. })));
        assert!(matches!(r.read_layer("nope", 0), Err(Error::Lookup(_))));
    }

    #[test]
    fn write_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.lprobe");
        let mut w = StoreWriter::create(&path, StoreHeader::uniform("m", 2, 4, Rational::integer(50), true)).unwrap();
        let wrong_dim = [tensor("u", 0, 3, 4, 0.0), tensor("u", 1, 3, 5, 0.0)];
        assert!(matches!(w.write_utterance("u", &wrong_dim), Err(Error::Format(_))));
        let ok = [tensor("u", 0, 3, 4, 0.0), tensor("u", 1, 3, 4, 0.0)];
        w.write_utterance("u", &ok).unwrap();
        assert!(matches!(w.write_utterance("u", &ok), Err(Error::Duplicate(_))));
        assert!(matches!(w.write_utterance("v", &ok[..1]), Err(Error::Format(_))));
        w.finish().unwrap();
        assert_eq!(StoreReader::open(&path).unwrap().utterance_ids(), ["u"]);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = two_layer_store(dir.path());
        let mut bytes = std::fs::read(&path).unwrap();
        let truncated = dir.path().join("t");
        std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(StoreReader::open(&truncated), Err(Error::Format(_))));
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(StoreReader::open(&path), Err(Error::Format(_))));
    }

    #[test]
    fn frame_index_examples() {
        let r50 = Rational::integer(50);
        assert_eq!(frame_index_for_time(0, Rational::integer(75), 10), 0);
        assert_eq!(frame_index_for_time(1000, r50, 100), 50);
        assert_eq!(frame_index_for_time(5000, r50, 100), 99);
        assert_eq!(frame_index_for_time(-250, r50, 100), 0);
        assert_eq!(frame_index_for_time(1000, Rational::new(75, 2).unwrap(), 100), 37);
    }

    #[test]
    fn rational_parse() {
        assert_eq!("50".parse::<Rational>().unwrap(), Rational::integer(50));
        assert_eq!("75/2".parse::<Rational>().unwrap(), Rational::new(75, 2).unwrap());
        assert!("0".parse::<Rational>().is_err());
        assert_eq!(Rational::new(75, 2).unwrap().to_string(), "75/2");
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn frame_index_monotone_and_in_range(a in -5000i64..20000, b in -5000i64..20000, num in 1u32..200, den in 1u32..4, frames in 1usize..500) {
                let rate = Rational::new(num, den).unwrap();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let (fl, fh) = (frame_index_for_time(lo, rate, frames), frame_index_for_time(hi, rate, frames));
                prop_assert!(fl <= fh);
                prop_assert!(fh < frames);
            }
        }
    }
}
