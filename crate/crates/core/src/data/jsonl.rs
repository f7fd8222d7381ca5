use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor2D;

use super::{quantize_f32, DatasetMeta, FrameSequence};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    version: u32,
    dim: usize,
    visual_dim: usize,
    audio_dim: usize,
    vocab: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    id: String,
    labels: Vec<usize>,
    frames: Vec<Vec<f32>>,
}

/// Reads a dataset file, validating every record against the metadata line.
/// Samples come back in file order.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(DatasetMeta, Vec<FrameSequence>)> {
    let file = File::open(path.as_ref())?;
    let mut lines = BufReader::new(file).lines();

    let first = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line: 1,
            msg: "empty file, expected a metadata line".into(),
        })??;
    let meta_line: MetaLine = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if meta_line.version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unsupported dataset version {}", meta_line.version),
        });
    }
    let mut meta = DatasetMeta {
        dim: meta_line.dim,
        visual_dim: meta_line.visual_dim,
        audio_dim: meta_line.audio_dim,
        vocab: meta_line.vocab,
        samples: 0,
    };
    meta.validate()?;

    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SampleLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        samples.push(validate_sample(record, &meta, line_no)?);
    }
    meta.samples = samples.len();
    Ok((meta, samples))
}

fn validate_sample(record: SampleLine, meta: &DatasetMeta, line: usize) -> Result<FrameSequence> {
    if record.frames.is_empty() {
        return Err(Error::Schema {
            line,
            msg: format!("sample {:?} has no frames", record.id),
        });
    }
    for (t, frame) in record.frames.iter().enumerate() {
        if frame.len() != meta.dim {
            return Err(Error::Schema {
                line,
                msg: format!(
                    "sample {:?} frame {t} has {} values, expected dim {}",
                    record.id,
                    frame.len(),
                    meta.dim
                ),
            });
        }
    }
    let mut labels = record.labels;
    labels.sort_unstable();
    if labels.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Schema {
            line,
            msg: format!("sample {:?} has duplicate labels", record.id),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= meta.vocab) {
        return Err(Error::Schema {
            line,
            msg: format!(
                "sample {:?} label {bad} outside vocabulary of size {}",
                record.id, meta.vocab
            ),
        });
    }
    let values: Vec<f64> = record
        .frames
        .iter()
        .flatten()
        .map(|&v| f64::from(v))
        .collect();
    let frames =
        Tensor2D::from_values(record.frames.len(), meta.dim, values).map_err(|e| Error::Schema {
            line,
            msg: format!("sample {:?}: {e}", record.id),
        })?;
    Ok(FrameSequence {
        id: record.id,
        frames,
        labels,
    })
}

/// Writes a dataset file (metadata line plus one line per sample).
pub fn write_dataset(
    meta: &DatasetMeta,
    samples: &[FrameSequence],
    path: impl AsRef<Path>,
) -> Result<()> {
    meta.validate()?;
    let file = File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    let meta_line = MetaLine {
        version: FORMAT_VERSION,
        dim: meta.dim,
        visual_dim: meta.visual_dim,
        audio_dim: meta.audio_dim,
        vocab: meta.vocab,
    };
    writeln!(out, "{}", serde_json::to_string(&meta_line)?)?;
    for sample in samples {
        let frames: Vec<Vec<f32>> = (0..sample.frames.rows())
            .map(|r| sample.frames.row(r).iter().map(|&v| v as f32).collect())
            .collect();
        let record = SampleLine {
            id: sample.id.clone(),
            labels: sample.labels.clone(),
            frames,
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    out.flush()?;
    Ok(())
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Data(format!("json: {e}"))
    }
}

/// Widens a function argument into the on-disk grid; exported for tests.
#[allow(dead_code)]
pub(crate) fn to_disk_precision(v: f64) -> f64 {
    quantize_f32(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(dim: usize, vocab: usize) -> DatasetMeta {
        DatasetMeta {
            dim,
            visual_dim: dim,
            audio_dim: 0,
            vocab,
            samples: 0,
        }
    }

    fn sample(id: &str, rows: &[&[f64]], labels: &[usize]) -> FrameSequence {
        FrameSequence {
            id: id.into(),
            frames: Tensor2D::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
                .unwrap(),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let samples = vec![
            sample("a", &[&[1.5, -2.25, 0.125, 3.0]], &[0, 2]),
            sample(
                "b",
                &[&[0.1f64 as f32 as f64, 0.2f32 as f64, 0.3f32 as f64, 0.7f32 as f64]],
                &[1],
            ),
        ];
        write_dataset(&meta(4, 3), &samples, &path).unwrap();
        let (loaded_meta, loaded) = load_dataset(&path).unwrap();
        assert_eq!(loaded_meta.dim, 4);
        assert_eq!(loaded_meta.samples, 2);
        assert_eq!(loaded, samples);
    }

    #[test]
    fn loads_meta_and_two_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(
            f,
            r#"{{"version":1,"dim":4,"visual_dim":4,"audio_dim":0,"vocab":2}}"#
        )
        .unwrap();
        writeln!(f, r#"{{"id":"a","labels":[0],"frames":[[1,2,3,4]]}}"#).unwrap();
        writeln!(f, r#"{{"id":"b","labels":[1],"frames":[[5,6,7,8],[9,10,11,12]]}}"#).unwrap();
        let (m, samples) = load_dataset(&path).unwrap();
        assert_eq!(m.dim, 4);
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[1].frames.rows(), 2);
    }

    #[test]
    fn short_frame_is_a_schema_error_naming_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(
            f,
            r#"{{"version":1,"dim":4,"visual_dim":4,"audio_dim":0,"vocab":2}}"#
        )
        .unwrap();
        writeln!(f, r#"{{"id":"a","labels":[0],"frames":[[1,2,3]]}}"#).unwrap();
        match load_dataset(&path) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_a_parse_error_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(
            f,
            r#"{{"version":1,"dim":2,"visual_dim":2,"audio_dim":0,"vocab":2}}"#
        )
        .unwrap();
        writeln!(f, r#"{{"id":"a","labels":[0],"frames":"#).unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_meta_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(
            f,
            r#"{{"version":1,"dim":2,"visual_dim":2,"audio_dim":0,"vocab":2,"extra":1}}"#
        )
        .unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Parse { line: 1, .. })));
    }
}
