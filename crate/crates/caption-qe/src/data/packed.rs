//! Packed binary sample storage for fast training-time loading.
//!
//! Layout: the magic bytes `CQE1`, a fixed header (format version, sample
//! count, label budget, the three vector dimensions), then one
//! variable-length record per sample with all vectors as little-endian
//! IEEE-754 f32. A sidecar `<path>.idx.json` maps `sample_id` to the byte
//! offset of its record for random access.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{DataError, Sample, IMAGE_DIM, LABEL_DIM, MAX_LABELS, SENTENCE_DIM};
use crate::io_util;
use crate::ratings::QualityScore;

const MAGIC: &[u8; 4] = b"CQE1";
const FORMAT_VERSION: u32 = 1;
/// Sentinel for "rating count unknown" in the target field.
const N_VALID_UNKNOWN: u32 = u32::MAX;

/// Sidecar index path for a packed file.
pub fn index_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".idx.json");
    PathBuf::from(name)
}

struct Writer<W: Write> {
    inner: W,
    offset: u64,
}

impl<W: Write> Writer<W> {
    fn new(inner: W) -> Self {
        Self { inner, offset: 0 }
    }

    fn write(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.inner.write_all(bytes)?;
        self.offset += bytes.len() as u64;
        Ok(())
    }

    fn write_u32(&mut self, value: u32) -> std::io::Result<()> {
        self.write(&value.to_le_bytes())
    }

    fn write_str(&mut self, value: &str) -> std::io::Result<()> {
        self.write_u32(value.len() as u32)?;
        self.write(value.as_bytes())
    }

    fn write_f32s(&mut self, values: &[f32]) -> std::io::Result<()> {
        for v in values {
            self.write(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

pub(super) fn save(samples: &[Sample], path: &Path, overwrite: bool) -> Result<(), DataError> {
    let file = io_util::create_file(path, overwrite)?;
    let mut w = Writer::new(BufWriter::new(file));
    w.write(MAGIC)?;
    w.write_u32(FORMAT_VERSION)?;
    w.write(&(samples.len() as u64).to_le_bytes())?;
    w.write_u32(MAX_LABELS as u32)?;
    w.write_u32(IMAGE_DIM as u32)?;
    w.write_u32(LABEL_DIM as u32)?;
    w.write_u32(SENTENCE_DIM as u32)?;

    let mut index = BTreeMap::new();
    for sample in samples {
        index.insert(sample.sample_id.clone(), w.offset);
        w.write_str(&sample.sample_id)?;
        w.write_str(&sample.image_id)?;
        match sample.target {
            Some(score) => {
                w.write(&[1u8, score.eighths()])?;
                w.write_u32(score.n_valid().unwrap_or(N_VALID_UNKNOWN))?;
            }
            None => {
                w.write(&[0u8, 0u8])?;
                w.write_u32(0)?;
            }
        }
        w.write_u32(sample.labels.len() as u32)?;
        w.write_f32s(sample.image.values())?;
        for label in &sample.labels {
            w.write_f32s(label.values())?;
        }
        w.write_f32s(sample.sentence.values())?;
    }
    w.inner.flush()?;

    let index_file = io_util::create_file(&index_path(path), overwrite)?;
    serde_json::to_writer_pretty(BufWriter::new(index_file), &index)
        .map_err(std::io::Error::from)?;
    Ok(())
}

struct Reader<R: Read> {
    inner: R,
    path: String,
}

impl<R: Read> Reader<R> {
    fn corrupt(&self, detail: impl Into<String>) -> DataError {
        DataError::PackedFormat {
            path: self.path.clone(),
            detail: detail.into(),
        }
    }

    fn read_exact(&mut self, buf: &mut [u8]) -> Result<(), DataError> {
        self.inner
            .read_exact(buf)
            .map_err(|e| self.corrupt(format!("unexpected end of file ({e})")))
    }

    fn read_u32(&mut self) -> Result<u32, DataError> {
        let mut buf = [0u8; 4];
        self.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn read_u64(&mut self) -> Result<u64, DataError> {
        let mut buf = [0u8; 8];
        self.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    fn read_str(&mut self) -> Result<String, DataError> {
        let len = self.read_u32()? as usize;
        let mut buf = vec![0u8; len];
        self.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|_| self.corrupt("string field is not UTF-8"))
    }

    fn read_f32s(&mut self, len: usize) -> Result<Vec<f32>, DataError> {
        let mut bytes = vec![0u8; len * 4];
        self.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub(super) fn load(path: &Path) -> Result<Vec<Sample>, DataError> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path: path.display().to_string(),
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(r.corrupt("bad magic bytes"));
    }
    let version = r.read_u32()?;
    if version != FORMAT_VERSION {
        return Err(r.corrupt(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let n_samples = r.read_u64()? as usize;
    let k_max = r.read_u32()? as usize;
    let dims = [r.read_u32()?, r.read_u32()?, r.read_u32()?];
    if dims != [IMAGE_DIM as u32, LABEL_DIM as u32, SENTENCE_DIM as u32] {
        return Err(r.corrupt(format!("unexpected vector dimensions {dims:?}")));
    }

    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let sample_id = r.read_str()?;
        let image_id = r.read_str()?;
        let mut target_buf = [0u8; 2];
        r.read_exact(&mut target_buf)?;
        let n_valid = r.read_u32()?;
        let target = match target_buf[0] {
            0 => None,
            1 => Some(QualityScore::from_eighths(
                target_buf[1],
                (n_valid != N_VALID_UNKNOWN).then_some(n_valid),
            )?),
            other => return Err(r.corrupt(format!("bad target flag {other}"))),
        };
        let n_labels = r.read_u32()? as usize;
        if n_labels > k_max {
            return Err(r.corrupt(format!("{n_labels} labels exceeds header K_max {k_max}")));
        }
        let image = r.read_f32s(IMAGE_DIM)?;
        let labels: Vec<Vec<f32>> = (0..n_labels)
            .map(|_| r.read_f32s(LABEL_DIM))
            .collect::<Result<_, _>>()?;
        let sentence = r.read_f32s(SENTENCE_DIM)?;
        samples.push(Sample::from_parts(
            sample_id, image_id, image, labels, sentence, target,
        )?);
    }
    Ok(samples)
}
