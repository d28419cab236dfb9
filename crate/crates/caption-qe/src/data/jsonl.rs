//! Human-readable sample storage: one JSON object per line.

use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Sample};
use crate::io_util;
use crate::ratings::QualityScore;

/// Wire form of one sample line. Vectors are stored at 32-bit precision.
#[derive(Debug, Serialize, Deserialize)]
struct SampleLine {
    sample_id: String,
    image_id: String,
    image: Vec<f32>,
    labels: Vec<Vec<f32>>,
    sentence: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<f32>,
}

impl From<&Sample> for SampleLine {
    fn from(sample: &Sample) -> Self {
        Self {
            sample_id: sample.sample_id.clone(),
            image_id: sample.image_id.clone(),
            image: sample.image.values().to_vec(),
            labels: sample.labels.iter().map(|l| l.values().to_vec()).collect(),
            sentence: sample.sentence.values().to_vec(),
            target: sample.target.map(|t| t.value() as f32),
        }
    }
}

impl SampleLine {
    fn into_sample(self) -> Result<Sample, DataError> {
        let target = self
            .target
            .map(|t| QualityScore::from_value(f64::from(t)))
            .transpose()?;
        Sample::from_parts(
            self.sample_id,
            self.image_id,
            self.image,
            self.labels,
            self.sentence,
            target,
        )
    }
}

pub(super) fn load(path: &Path) -> Result<Vec<Sample>, DataError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut samples = Vec::new();
    for item in io_util::numbered_lines(reader) {
        let (line, text) = item?;
        let parsed: SampleLine =
            serde_json::from_str(&text).map_err(|source| DataError::Parse { line, source })?;
        samples.push(parsed.into_sample()?);
    }
    Ok(samples)
}

pub(super) fn save(samples: &[Sample], path: &Path, overwrite: bool) -> Result<(), DataError> {
    let mut writer = BufWriter::new(io_util::create_file(path, overwrite)?);
    for sample in samples {
        let line = SampleLine::from(sample);
        serde_json::to_writer(&mut writer, &line).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}
